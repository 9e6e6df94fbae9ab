//! Ensemble construction: many independent GP experts over one dataset.
//!
//! Three strategies pick each expert's training subset:
//!
//! * `Sod` — a uniform random subset per expert;
//! * `Local` — the nearest neighbors of a randomly chosen center;
//! * `Tree` — one expert per ball-tree node, trained on a random subset of
//!   the points under that node (breadth-first, truncated to the requested
//!   expert count).
//!
//! Subset selection is serial and seed-driven; fitting is embarrassingly
//! parallel, so the trained ensemble is identical regardless of worker
//! count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balltree::{build_ball_tree, BallTree};
use crate::error::{Error, Result};
use crate::gp::{gp_fit, optimize_hyperparameters, DataMatrix, GPExpert, Hyperparams, OptimizerConfig};
use crate::rng::substream;

pub use crate::balltree::BallNode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sod,
    Local,
    Tree,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sod => "sod",
            Strategy::Local => "local",
            Strategy::Tree => "tree",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How to build and train an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    pub points_per_expert: usize,
    pub num_experts: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl EnsembleConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        EnsembleConfig {
            strategy,
            points_per_expert: 256,
            num_experts: 512,
            seed,
            optimizer: OptimizerConfig::default(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.points_per_expert < 2 {
            return Err(Error::input("points_per_expert must be at least 2"));
        }
        if self.num_experts < 1 {
            return Err(Error::input("num_experts must be at least 1"));
        }
        if self.points_per_expert > n {
            return Err(Error::input(format!(
                "points_per_expert {} exceeds dataset size {n}",
                self.points_per_expert
            )));
        }
        Ok(())
    }
}

/// Where an expert's training subset came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertProvenance {
    pub strategy: Strategy,
    pub subset: Vec<usize>,
    /// Ball-tree node the expert is attached to (Tree strategy only).
    pub node_id: Option<usize>,
    /// Neighborhood center the subset was drawn around (Local strategy only).
    pub center: Option<usize>,
    /// Non-fatal optimizer diagnostics for this expert.
    pub optimizer_warning: Option<String>,
}

/// Record of an expert whose fit failed hard and was dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertFailure {
    pub planned_index: usize,
    pub node_id: Option<usize>,
    pub message: String,
}

/// A trained ensemble. Experts and provenance are index-aligned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ensemble {
    strategy: Strategy,
    experts: Vec<GPExpert>,
    provenance: Vec<ExpertProvenance>,
    tree: Option<BallTree>,
    failures: Vec<ExpertFailure>,
}

impl Ensemble {
    /// Wraps externally fitted experts (no tree, synthetic provenance).
    pub fn from_experts(strategy: Strategy, experts: Vec<GPExpert>) -> Self {
        let provenance = experts
            .iter()
            .map(|_| ExpertProvenance {
                strategy,
                subset: Vec::new(),
                node_id: None,
                center: None,
                optimizer_warning: None,
            })
            .collect();
        Ensemble {
            strategy,
            experts,
            provenance,
            tree: None,
            failures: Vec::new(),
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn experts(&self) -> &[GPExpert] {
        &self.experts
    }

    pub fn provenance(&self) -> &[ExpertProvenance] {
        &self.provenance
    }

    pub fn tree(&self) -> Option<&BallTree> {
        self.tree.as_ref()
    }

    pub fn failures(&self) -> &[ExpertFailure] {
        &self.failures
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Expert index attached to a tree node, if that node received one.
    pub fn expert_for_node(&self, node_id: usize) -> Option<usize> {
        self.provenance.iter().position(|p| p.node_id == Some(node_id))
    }
}

/// One planned expert before fitting.
struct SubsetPlan {
    subset: Vec<usize>,
    node_id: Option<usize>,
    center: Option<usize>,
}

/// Draws `k` distinct indices from `0..n`, sorted ascending.
fn sample_indices(rng: &mut rand_chacha::ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn plan_sod(n: usize, config: &EnsembleConfig) -> Vec<SubsetPlan> {
    (0..config.num_experts)
        .map(|i| {
            let mut rng = substream(config.seed, &format!("sod/subset/{i}"));
            SubsetPlan {
                subset: sample_indices(&mut rng, n, config.points_per_expert),
                node_id: None,
                center: None,
            }
        })
        .collect()
}

/// Centers are drawn without replacement while unused ones remain; once the
/// pool is exhausted a fresh permutation starts.
fn plan_local(data: &DataMatrix, config: &EnsembleConfig) -> Vec<SubsetPlan> {
    let n = data.n_rows();
    let mut center_rng = substream(config.seed, "local/centers");
    let mut pool: Vec<usize> = Vec::new();

    (0..config.num_experts)
        .map(|_| {
            if pool.is_empty() {
                pool = rand::seq::index::sample(&mut center_rng, n, n).into_vec();
            }
            let center = pool.pop().expect("pool refilled above");

            // k nearest neighbors of the center, ties broken by index.
            let cx = data.row(center);
            let mut order: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let d: f64 = data
                        .row(i)
                        .iter()
                        .zip(cx)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, i)
                })
                .collect();
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut subset: Vec<usize> =
                order[..config.points_per_expert].iter().map(|&(_, i)| i).collect();
            subset.sort_unstable();
            SubsetPlan {
                subset,
                node_id: None,
                center: Some(center),
            }
        })
        .collect()
}

fn plan_tree(data: &DataMatrix, config: &EnsembleConfig) -> Result<(Vec<SubsetPlan>, BallTree)> {
    let tree = build_ball_tree(data, config.points_per_expert, config.seed)?;
    let node_count = tree.len().min(config.num_experts);
    let plans = (0..node_count)
        .map(|node_id| {
            let node = tree.node(node_id);
            let take = config.points_per_expert.min(node.point_indices.len());
            let mut rng = substream(config.seed, &format!("tree/subset/{node_id}"));
            let picks = sample_indices(&mut rng, node.point_indices.len(), take);
            let mut subset: Vec<usize> = picks.iter().map(|&p| node.point_indices[p]).collect();
            subset.sort_unstable();
            SubsetPlan {
                subset,
                node_id: Some(node_id),
                center: None,
            }
        })
        .collect();
    Ok((plans, tree))
}

fn fit_planned(
    data: &DataMatrix,
    targets: &[f64],
    config: &EnsembleConfig,
    plans: Vec<SubsetPlan>,
    tree: Option<BallTree>,
) -> Ensemble {
    let fitted: Vec<(usize, std::result::Result<(GPExpert, Option<String>), String>, SubsetPlan)> = plans
        .into_par_iter()
        .enumerate()
        .map(|(i, plan)| {
            let result = fit_one(data, targets, config, i, &plan);
            (i, result, plan)
        })
        .collect();

    let mut experts = Vec::new();
    let mut provenance = Vec::new();
    let mut failures = Vec::new();
    for (i, result, plan) in fitted {
        match result {
            Ok((expert, warning)) => {
                experts.push(expert);
                provenance.push(ExpertProvenance {
                    strategy: config.strategy,
                    subset: plan.subset,
                    node_id: plan.node_id,
                    optimizer_warning: warning,
                });
            }
            Err(message) => failures.push(ExpertFailure {
                planned_index: i,
                node_id: plan.node_id,
                message,
            }),
        }
    }

    Ensemble {
        strategy: config.strategy,
        experts,
        provenance,
        tree,
        failures,
    }
}

fn fit_one(
    data: &DataMatrix,
    targets: &[f64],
    config: &EnsembleConfig,
    index: usize,
    plan: &SubsetPlan,
) -> std::result::Result<(GPExpert, Option<String>), String> {
    let fail = |e: Error| format!("expert {index} ({} strategy): {e}", config.strategy);

    let inputs = data.select_rows(&plan.subset).map_err(fail)?;
    let subset_targets: Vec<f64> = plan.subset.iter().map(|&i| targets[i]).collect();
    if subset_targets.iter().any(|y| !y.is_finite()) {
        return Err(fail(Error::input("subset targets contain a non-finite value")));
    }

    let init = Hyperparams::init_from_data(&inputs, &subset_targets);
    let opt_config = OptimizerConfig {
        restart_seed: restart_seed(config, index),
        ..config.optimizer.clone()
    };
    let outcome =
        optimize_hyperparameters(&inputs, &subset_targets, &init, &opt_config).map_err(fail)?;
    let expert = gp_fit(&inputs, &subset_targets, &outcome.hyper).map_err(fail)?;
    Ok((expert, outcome.warning))
}

/// Seed of the optimizer restart stream for one expert.
fn restart_seed(config: &EnsembleConfig, index: usize) -> u64 {
    config
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
        .wrapping_add(config.strategy as u64)
}

/// Subset-of-data ensemble: independent uniform subsets.
pub fn build_sod(data: &DataMatrix, targets: &[f64], config: &EnsembleConfig) -> Result<Ensemble> {
    check_shapes(data, targets)?;
    config.validate(data.n_rows())?;
    if config.strategy != Strategy::Sod {
        return Err(Error::usage("build_sod requires strategy = sod"));
    }
    let plans = plan_sod(data.n_rows(), config);
    Ok(fit_planned(data, targets, config, plans, None))
}

/// Local ensemble: nearest neighbors around randomly chosen centers.
pub fn build_local(data: &DataMatrix, targets: &[f64], config: &EnsembleConfig) -> Result<Ensemble> {
    check_shapes(data, targets)?;
    config.validate(data.n_rows())?;
    if config.strategy != Strategy::Local {
        return Err(Error::usage("build_local requires strategy = local"));
    }
    let plans = plan_local(data, config);
    Ok(fit_planned(data, targets, config, plans, None))
}

/// Tree ensemble: one expert per ball-tree node in breadth-first order.
pub fn build_tree(data: &DataMatrix, targets: &[f64], config: &EnsembleConfig) -> Result<Ensemble> {
    check_shapes(data, targets)?;
    config.validate(data.n_rows())?;
    if config.strategy != Strategy::Tree {
        return Err(Error::usage("build_tree requires strategy = tree"));
    }
    let (plans, tree) = plan_tree(data, config)?;
    Ok(fit_planned(data, targets, config, plans, Some(tree)))
}

fn check_shapes(data: &DataMatrix, targets: &[f64]) -> Result<()> {
    if data.n_rows() != targets.len() {
        return Err(Error::input(format!(
            "{} input rows but {} targets",
            data.n_rows(),
            targets.len()
        )));
    }
    Ok(())
}

/// Expert indices on the root-to-leaf path containing `x`.
pub fn tree_path_experts(ensemble: &Ensemble, x: &[f64]) -> Result<Vec<usize>> {
    let tree = ensemble
        .tree()
        .ok_or_else(|| Error::usage("tree_path_experts requires a tree-strategy ensemble"))?;
    Ok(tree
        .path_to_leaf(x)
        .into_iter()
        .filter_map(|node_id| ensemble.expert_for_node(node_id))
        .collect())
}

/// Trains an ensemble with the requested worker count. Subset selection is
/// serial from the seed, so the result does not depend on `parallelism`
/// (0 means the global default pool).
pub fn train_ensemble(
    data: &DataMatrix,
    targets: &[f64],
    config: &EnsembleConfig,
    parallelism: usize,
) -> Result<Ensemble> {
    let build = || match config.strategy {
        Strategy::Sod => build_sod(data, targets, config),
        Strategy::Local => build_local(data, targets, config),
        Strategy::Tree => build_tree(data, targets, config),
    };
    if parallelism == 0 {
        return build();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::usage(format!("could not build thread pool: {e}")))?;
    pool.install(build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::gp_predict;
    use rand::Rng;

    fn synth(n: usize, dim: usize, seed: u64) -> (DataMatrix, Vec<f64>) {
        let mut rng = substream(seed, "test/experts-data");
        let values: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data = DataMatrix::new(n, dim, values).unwrap();
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let x = data.row(i);
                (1.5 * x[0]).sin() + 0.1 * rng.random_range(-1.0..1.0)
            })
            .collect();
        (data, targets)
    }

    fn quick_config(strategy: Strategy, ppe: usize, count: usize, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            strategy,
            points_per_expert: ppe,
            num_experts: count,
            seed,
            optimizer: OptimizerConfig {
                max_iters: 15,
                restarts: 0,
                ..OptimizerConfig::default()
            },
        }
    }

    #[test]
    fn sod_subsets_have_requested_cardinality() {
        let (data, targets) = synth(1000, 2, 1);
        let config = quick_config(Strategy::Sod, 256, 4, 1);
        let ensemble = build_sod(&data, &targets, &config).unwrap();
        assert_eq!(ensemble.len(), 4);
        for p in ensemble.provenance() {
            assert_eq!(p.subset.len(), 256);
            let mut unique = p.subset.clone();
            unique.dedup();
            assert_eq!(unique.len(), 256, "subset indices must be distinct");
        }
    }

    #[test]
    fn sod_is_deterministic() {
        let (data, targets) = synth(200, 1, 2);
        let config = quick_config(Strategy::Sod, 32, 3, 7);
        let a = build_sod(&data, &targets, &config).unwrap();
        let b = build_sod(&data, &targets, &config).unwrap();
        for (pa, pb) in a.provenance().iter().zip(b.provenance()) {
            assert_eq!(pa.subset, pb.subset);
        }
        for (ea, eb) in a.experts().iter().zip(b.experts()) {
            assert_eq!(ea.hyper(), eb.hyper());
        }
    }

    #[test]
    fn sod_rejects_oversized_subsets() {
        let (data, targets) = synth(10, 1, 3);
        let config = quick_config(Strategy::Sod, 11, 1, 0);
        assert!(matches!(build_sod(&data, &targets, &config), Err(Error::Input(_))));
    }

    #[test]
    fn single_expert_equals_full_gp() {
        let (data, targets) = synth(48, 1, 4);
        let config = quick_config(Strategy::Sod, 48, 1, 9);
        let ensemble = build_sod(&data, &targets, &config).unwrap();
        assert_eq!(ensemble.len(), 1);

        // Oracle: a directly built full GP with the same deterministic
        // optimizer settings (restarts=0 makes the restart seed inert).
        let init = Hyperparams::init_from_data(&data, &targets);
        let outcome = optimize_hyperparameters(&data, &targets, &init, &config.optimizer).unwrap();
        let full = gp_fit(&data, &targets, &outcome.hyper).unwrap();

        for x in [[-1.5], [0.0], [0.7], [2.2]] {
            let a = gp_predict(&ensemble.experts()[0], &x).unwrap();
            let b = gp_predict(&full, &x).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-10);
            assert!((a.variance - b.variance).abs() < 1e-10);
        }
    }

    #[test]
    fn local_subsets_are_contiguous_on_a_line() {
        let data = DataMatrix::new(1000, 1, (0..1000).map(|i| i as f64).collect()).unwrap();
        let targets: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin()).collect();
        let mut config = quick_config(Strategy::Local, 256, 3, 5);
        config.optimizer.max_iters = 3;
        let ensemble = build_local(&data, &targets, &config).unwrap();
        for p in ensemble.provenance() {
            let lo = *p.subset.first().unwrap();
            let hi = *p.subset.last().unwrap();
            assert_eq!(hi - lo, 255, "nearest neighbors on a line form a window");
            assert_eq!(p.subset.len(), 256);
            let contiguous: Vec<usize> = (lo..=hi).collect();
            assert_eq!(p.subset, contiguous);
        }
    }

    #[test]
    fn local_subset_contains_each_center() {
        let (data, targets) = synth(60, 2, 6);
        let mut config = quick_config(Strategy::Local, 10, 8, 11);
        config.optimizer.max_iters = 3;
        let ensemble = build_local(&data, &targets, &config).unwrap();
        // The center is its own nearest neighbor, so every subset has an
        // element at distance zero from the drawn center; with distinct
        // points that is the center itself. Verify via the windowed
        // re-derivation: the closest subset member must be distance 0.
        for p in ensemble.provenance() {
            let best: f64 = p
                .subset
                .iter()
                .map(|&i| {
                    p.subset
                        .iter()
                        .map(move |&j| {
                            data.row(i)
                                .iter()
                                .zip(data.row(j))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(best, 0.0);
        }
    }

    #[test]
    fn local_full_size_subsets_cover_everything() {
        let (data, targets) = synth(20, 1, 8);
        let mut config = quick_config(Strategy::Local, 20, 2, 3);
        config.optimizer.max_iters = 3;
        let ensemble = build_local(&data, &targets, &config).unwrap();
        let all: Vec<usize> = (0..20).collect();
        for p in ensemble.provenance() {
            assert_eq!(p.subset, all);
        }
    }

    #[test]
    fn tree_ensemble_depth_one() {
        let (data, targets) = synth(512, 2, 12);
        let mut config = quick_config(Strategy::Tree, 256, 8, 13);
        config.optimizer.max_iters = 8;
        let ensemble = build_tree(&data, &targets, &config).unwrap();
        let tree = ensemble.tree().unwrap();
        assert_eq!(tree.len(), 3, "512 points with capacity 256 split once");
        assert_eq!(ensemble.len(), 3);

        // Root expert: 256 points drawn from all 512.
        let root = &ensemble.provenance()[0];
        assert_eq!(root.node_id, Some(0));
        assert_eq!(root.subset.len(), 256);
        // Leaf experts: subsets of their own node's points.
        for p in &ensemble.provenance()[1..] {
            let node = tree.node(p.node_id.unwrap());
            assert!(p.subset.iter().all(|i| node.point_indices.contains(i)));
            assert!(p.subset.len() <= 256);
        }
    }

    #[test]
    fn tree_is_deterministic() {
        let (data, targets) = synth(300, 2, 14);
        let mut config = quick_config(Strategy::Tree, 64, 16, 21);
        config.optimizer.max_iters = 3;
        let a = build_tree(&data, &targets, &config).unwrap();
        let b = build_tree(&data, &targets, &config).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.provenance().iter().zip(b.provenance()) {
            assert_eq!(pa.subset, pb.subset);
            assert_eq!(pa.node_id, pb.node_id);
        }
    }

    #[test]
    fn tree_path_experts_walks_root_to_leaf() {
        // Two well-separated clusters: depth-1 tree.
        let mut rows = Vec::new();
        for i in 0..64 {
            rows.push(vec![0.01 * i as f64]);
        }
        for i in 0..64 {
            rows.push(vec![100.0 + 0.01 * i as f64]);
        }
        let data = DataMatrix::from_rows(&rows).unwrap();
        let targets: Vec<f64> = (0..128).map(|i| (i as f64 * 0.05).sin()).collect();
        let mut config = quick_config(Strategy::Tree, 64, 8, 17);
        config.optimizer.max_iters = 3;
        let ensemble = build_tree(&data, &targets, &config).unwrap();
        assert_eq!(ensemble.tree().unwrap().len(), 3);

        let path = tree_path_experts(&ensemble, &[0.3]).unwrap();
        assert_eq!(path.len(), 2, "root + one leaf");
        assert_eq!(ensemble.provenance()[path[0]].node_id, Some(0));
        let leaf_node = ensemble.provenance()[path[1]].node_id.unwrap();
        let node = ensemble.tree().unwrap().node(leaf_node);
        assert!(node.point_indices.iter().all(|&i| i < 64));

        // Single-node tree returns just the root expert.
        let mut small_config = quick_config(Strategy::Tree, 64, 4, 18);
        small_config.optimizer.max_iters = 3;
        let small_data = data.select_rows(&(0..32).collect::<Vec<_>>()).unwrap();
        let small = build_tree(&small_data, &targets[..32].to_vec(), &small_config).unwrap();
        assert_eq!(tree_path_experts(&small, &[0.1]).unwrap(), vec![0]);
    }

    #[test]
    fn tree_path_rejects_non_tree_ensembles() {
        let (data, targets) = synth(30, 1, 19);
        let config = quick_config(Strategy::Sod, 10, 2, 23);
        let ensemble = build_sod(&data, &targets, &config).unwrap();
        assert!(matches!(
            tree_path_experts(&ensemble, &[0.0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn training_invariant_to_worker_count() {
        let (data, targets) = synth(120, 2, 20);
        let config = quick_config(Strategy::Sod, 24, 6, 29);
        let serial = train_ensemble(&data, &targets, &config, 1).unwrap();
        let parallel = train_ensemble(&data, &targets, &config, 8).unwrap();
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.experts().iter().zip(parallel.experts()) {
            let ha = a.hyper().to_log_vec();
            let hb = b.hyper().to_log_vec();
            for (x, y) in ha.iter().zip(&hb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_subset_removes_only_that_expert() {
        let (data, mut targets) = synth(64, 1, 21);
        // Seed chosen so exactly one planned subset contains index 63.
        let config = quick_config(Strategy::Sod, 8, 16, 37);
        let clean = build_sod(&data, &targets, &config).unwrap();
        let hits = clean
            .provenance()
            .iter()
            .filter(|p| p.subset.contains(&63))
            .count();
        assert_eq!(hits, 1, "fixture seed must place index 63 in exactly one subset");

        targets[63] = f64::NAN;
        let poisoned = build_sod(&data, &targets, &config).unwrap();
        assert_eq!(poisoned.len(), 15);
        assert_eq!(poisoned.failures().len(), 1);
        assert!(poisoned.failures()[0].message.contains("expert"));
    }
}
