//! Binary ball tree over training inputs.
//!
//! Nodes are stored in breadth-first order (the root has id 0), which the
//! tree-based expert construction relies on when it truncates the node list.
//! Splitting uses the classic furthest-pair rule: probe a point, walk to its
//! furthest point p1, walk to p1's furthest point p2, then assign every
//! point to the nearer pivot.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::gp::DataMatrix;
use crate::rng::substream;
use rand::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallNode {
    /// Mean of the member points.
    pub center: Vec<f64>,
    /// Maximum distance from the center to any member point.
    pub radius: f64,
    /// Indices (into the source data) of every point under this node.
    pub point_indices: Vec<usize>,
    /// Child node ids, absent for leaves.
    pub children: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallTree {
    nodes: Vec<BallNode>,
}

impl BallTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &BallNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[BallNode] {
        &self.nodes
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_none()
    }

    /// Node ids from the root to the leaf whose region contains `x`,
    /// descending through the child with the nearer center (ties take the
    /// first child).
    pub fn path_to_leaf(&self, x: &[f64]) -> Vec<usize> {
        let mut path = vec![0];
        let mut id = 0;
        while let Some((left, right)) = self.nodes[id].children {
            let dl = sq_distance(x, &self.nodes[left].center);
            let dr = sq_distance(x, &self.nodes[right].center);
            id = if dl <= dr { left } else { right };
            path.push(id);
        }
        path
    }
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn center_of(data: &DataMatrix, indices: &[usize]) -> Vec<f64> {
    let dim = data.n_cols();
    let mut center = vec![0.0; dim];
    for &i in indices {
        for (c, v) in center.iter_mut().zip(data.row(i)) {
            *c += v;
        }
    }
    let n = indices.len() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    center
}

fn radius_of(data: &DataMatrix, indices: &[usize], center: &[f64]) -> f64 {
    indices
        .iter()
        .map(|&i| sq_distance(data.row(i), center))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Index (into `indices`) of the member furthest from `from`, ties to the
/// smaller data index.
fn furthest(data: &DataMatrix, indices: &[usize], from: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (pos, &i) in indices.iter().enumerate() {
        let d = sq_distance(data.row(i), from);
        if d > best_d {
            best_d = d;
            best = pos;
        }
    }
    best
}

/// Builds a ball tree, splitting nodes until every leaf holds at most
/// `leaf_capacity` points.
pub fn build_ball_tree(data: &DataMatrix, leaf_capacity: usize, seed: u64) -> Result<BallTree> {
    if leaf_capacity == 0 {
        return Err(Error::input("leaf capacity must be at least 1"));
    }
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::input("cannot build a ball tree over an empty dataset"));
    }

    let mut rng = substream(seed, "balltree/probe");
    let mut nodes: Vec<BallNode> = Vec::new();
    let mut queue: VecDeque<(usize, Vec<usize>)> = VecDeque::new();

    let root_indices: Vec<usize> = (0..n).collect();
    nodes.push(make_node(data, root_indices.clone()));
    queue.push_back((0, root_indices));

    while let Some((id, indices)) = queue.pop_front() {
        if indices.len() <= leaf_capacity {
            continue;
        }
        let (left_idx, right_idx) = split_indices(data, &indices, &mut rng);

        let left_id = nodes.len();
        nodes.push(make_node(data, left_idx.clone()));
        let right_id = nodes.len();
        nodes.push(make_node(data, right_idx.clone()));
        nodes[id].children = Some((left_id, right_id));

        queue.push_back((left_id, left_idx));
        queue.push_back((right_id, right_idx));
    }

    Ok(BallTree { nodes })
}

fn make_node(data: &DataMatrix, indices: Vec<usize>) -> BallNode {
    let center = center_of(data, &indices);
    let radius = radius_of(data, &indices, &center);
    BallNode {
        center,
        radius,
        point_indices: indices,
        children: None,
    }
}

/// Furthest-pair split. Degenerate nodes (all points coincident) fall back
/// to an index-halving split so construction always terminates.
fn split_indices(
    data: &DataMatrix,
    indices: &[usize],
    rng: &mut rand_chacha::ChaCha12Rng,
) -> (Vec<usize>, Vec<usize>) {
    let probe = indices[rng.random_range(0..indices.len())];
    let p1 = indices[furthest(data, indices, data.row(probe))];
    let p2 = indices[furthest(data, indices, data.row(p1))];

    let mut left = Vec::new();
    let mut right = Vec::new();
    for &i in indices {
        let d1 = sq_distance(data.row(i), data.row(p1));
        let d2 = sq_distance(data.row(i), data.row(p2));
        if d1 <= d2 {
            left.push(i);
        } else {
            right.push(i);
        }
    }

    if left.is_empty() || right.is_empty() {
        let mid = indices.len() / 2;
        return (indices[..mid].to_vec(), indices[mid..].to_vec());
    }
    (left, right)
}
