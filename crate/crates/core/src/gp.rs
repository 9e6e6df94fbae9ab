//! Exact single-output Gaussian process regression.
//!
//! The kernel is the sum of an ARD squared-exponential kernel and a white
//! noise kernel,
//!
//! `k(a, b) = sf2 * exp(-0.5 * sum_d (a_d - b_d)^2 / ls_d^2) + sn2 * [a == b]`
//!
//! where the white term contributes only to same-point evaluations (the
//! training diagonal and a test point's own prior variance), never to
//! train-test cross covariances. Fitting factorizes the training covariance
//! with a Cholesky decomposition, escalating a diagonal jitter when the
//! matrix is not numerically positive definite. Hyperparameters live in log
//! domain and are learned by maximizing the log marginal likelihood with an
//! L-BFGS ascent on its analytic gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter ladder tried when the Cholesky factorization fails.
/// Each entry is multiplied by the mean diagonal of the covariance matrix.
const JITTER_LADDER: [f64; 8] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Log-domain kernel hyperparameters: signal variance, one lengthscale per
/// input dimension, and white-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise_variance: f64,
}

impl Hyperparams {
    pub fn new(
        log_signal_variance: f64,
        log_lengthscales: Vec<f64>,
        log_noise_variance: f64,
    ) -> Result<Self> {
        let hyper = Hyperparams {
            log_signal_variance,
            log_lengthscales,
            log_noise_variance,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Builds hyperparameters from natural-domain (positive) values.
    pub fn from_natural(signal_variance: f64, lengthscales: &[f64], noise_variance: f64) -> Result<Self> {
        if signal_variance <= 0.0 || noise_variance < 0.0 {
            return Err(Error::input(
                "signal variance must be positive and noise variance nonnegative",
            ));
        }
        if lengthscales.iter().any(|&l| l <= 0.0) {
            return Err(Error::input("lengthscales must be positive"));
        }
        // ln(0) = -inf for an exactly-zero noise variance is deliberately
        // allowed: exp(-inf) = 0 recovers the noiseless kernel.
        Hyperparams::new(
            signal_variance.ln(),
            lengthscales.iter().map(|l| l.ln()).collect(),
            noise_variance.ln(),
        )
    }

    /// Scale-aware defaults: per-dimension lengthscale from the data spread,
    /// signal variance from the target variance, noise at a tenth of it.
    pub fn init_from_data(inputs: &DataMatrix, targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let var = var.max(1e-12);

        let log_lengthscales = (0..inputs.n_cols())
            .map(|d| {
                let col_mean = (0..inputs.n_rows()).map(|i| inputs.row(i)[d]).sum::<f64>()
                    / inputs.n_rows() as f64;
                let col_var = (0..inputs.n_rows())
                    .map(|i| (inputs.row(i)[d] - col_mean).powi(2))
                    .sum::<f64>()
                    / inputs.n_rows() as f64;
                col_var.max(1e-18).sqrt().ln()
            })
            .collect();

        Hyperparams {
            log_signal_variance: var.ln(),
            log_lengthscales,
            log_noise_variance: (0.1 * var).ln(),
        }
    }

    /// Number of input dimensions this kernel expects.
    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Flattens to the optimizer's parameter vector:
    /// `[log sf2, log ls_1 .. log ls_D, log sn2]`.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.log_signal_variance);
        v.extend_from_slice(&self.log_lengthscales);
        v.push(self.log_noise_variance);
        v
    }

    /// Inverse of [`Hyperparams::to_log_vec`].
    pub fn from_log_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::input("hyperparameter vector needs at least 3 entries"));
        }
        Hyperparams::new(v[0], v[1..v.len() - 1].to_vec(), v[v.len() - 1])
    }

    fn validate(&self) -> Result<()> {
        if self.log_lengthscales.is_empty() {
            return Err(Error::input("at least one lengthscale is required"));
        }
        let all = self
            .to_log_vec()
            .into_iter()
            .all(|v| v.is_finite() || v == f64::NEG_INFINITY);
        // -inf is tolerated only for the noise term (exactly zero noise).
        if !all
            || !self.log_signal_variance.is_finite()
            || self.log_lengthscales.iter().any(|l| !l.is_finite())
            || self.log_noise_variance.is_nan()
            || self.log_noise_variance == f64::INFINITY
        {
            return Err(Error::input("log hyperparameters must be finite"));
        }
        Ok(())
    }
}

/// Dense row-major matrix of input points (one row per point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    /// Builds from row-major values; every entry must be finite.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("data matrix must have at least one row and column"));
        }
        if values.len() != rows * cols {
            return Err(Error::input(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite value at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(DataMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("data matrix must have at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows in data matrix"));
        }
        let values = rows.iter().flatten().copied().collect();
        DataMatrix::new(rows.len(), cols, values)
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Copies the given rows into a new matrix (indices may repeat).
    pub fn select_rows(&self, indices: &[usize]) -> Result<DataMatrix> {
        if indices.is_empty() {
            return Err(Error::input("row selection must be nonempty"));
        }
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::input(format!("row index {i} out of bounds ({} rows)", self.rows)));
            }
            values.extend_from_slice(self.row(i));
        }
        DataMatrix::new(indices.len(), self.cols, values)
    }
}

/// One trained GP expert: its training subset, the lower Cholesky factor of
/// the (possibly jittered) training covariance, and the weight vector
/// solving `K w = y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GPExpert {
    inputs: DataMatrix,
    targets: DVector<f64>,
    hyper: Hyperparams,
    chol_factor: DMatrix<f64>,
    weight_vector: DVector<f64>,
    jitter: f64,
}

impl GPExpert {
    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs.n_cols()
    }

    pub fn inputs(&self) -> &DataMatrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        self.targets.as_slice()
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_factor
    }

    pub fn weight_vector(&self) -> &[f64] {
        self.weight_vector.as_slice()
    }

    /// Diagonal jitter that was added to make the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Predictive distribution of one expert at one test point. The variance is
/// noise-inclusive, and `prior_variance` is the kernel's own-point value
/// `k(x, x)`, also noise-inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: f64,
    pub variance: f64,
    pub prior_variance: f64,
}

/// Evaluates the ARD + white kernel between two points.
///
/// `same_point` selects diagonal semantics: the white-noise variance is
/// added only when the two arguments denote the same point.
pub fn kernel_value(a: &[f64], b: &[f64], hyper: &Hyperparams, same_point: bool) -> Result<f64> {
    if a.len() != b.len() || a.len() != hyper.dim() {
        return Err(Error::input(format!(
            "kernel dimension mismatch: |a|={}, |b|={}, lengthscales={}",
            a.len(),
            b.len(),
            hyper.dim()
        )));
    }
    let mut exponent = 0.0;
    for d in 0..a.len() {
        let diff = a[d] - b[d];
        let ls = hyper.log_lengthscales[d].exp();
        exponent += (diff / ls).powi(2);
    }
    let mut value = hyper.signal_variance() * (-0.5 * exponent).exp();
    if same_point {
        value += hyper.noise_variance();
    }
    Ok(value)
}

/// Builds the training covariance matrix (noise on the diagonal).
fn covariance_matrix(inputs: &DataMatrix, hyper: &Hyperparams) -> Result<DMatrix<f64>> {
    let n = inputs.n_rows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_value(inputs.row(i), inputs.row(j), hyper, i == j)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Fits an exact GP: factorizes `K = L Lᵀ` (escalating jitter on failure)
/// and solves `K w = y`.
pub fn gp_fit(inputs: &DataMatrix, targets: &[f64], hyper: &Hyperparams) -> Result<GPExpert> {
    if inputs.n_rows() != targets.len() {
        return Err(Error::input(format!(
            "{} input rows but {} targets",
            inputs.n_rows(),
            targets.len()
        )));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::input("targets contain a non-finite value"));
    }
    if hyper.dim() != inputs.n_cols() {
        return Err(Error::input(format!(
            "hyperparameters expect {} dimensions, data has {}",
            hyper.dim(),
            inputs.n_cols()
        )));
    }

    let k = covariance_matrix(inputs, hyper)?;
    let mean_diag = k.diagonal().sum() / k.nrows() as f64;

    let mut factored = None;
    let mut used_jitter = 0.0;
    for &scale in JITTER_LADDER.iter() {
        let jitter = scale * mean_diag;
        let mut attempt = k.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = attempt.cholesky() {
            factored = Some(chol);
            used_jitter = jitter;
            break;
        }
    }
    let chol = factored.ok_or_else(|| {
        Error::numerical(format!(
            "Cholesky factorization failed for a {}-point expert even with maximum jitter",
            targets.len()
        ))
    })?;

    let y = DVector::from_column_slice(targets);
    let weight_vector = chol.solve(&y);

    Ok(GPExpert {
        inputs: inputs.clone(),
        targets: y,
        hyper: hyper.clone(),
        chol_factor: chol.unpack(),
        weight_vector,
        jitter: used_jitter,
    })
}

/// Predictive mean and variance of one expert at `x`.
///
/// The cross-covariance vector excludes the white term; the own-point value
/// `k(x, x)` includes it, so the returned variance and prior variance are
/// both noise-inclusive.
pub fn gp_predict(expert: &GPExpert, x: &[f64]) -> Result<PredictiveGaussian> {
    if x.len() != expert.dim() {
        return Err(Error::input(format!(
            "test point has {} dimensions, expert expects {}",
            x.len(),
            expert.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("test point contains a non-finite value"));
    }

    let m = expert.size();
    let mut k_star = DVector::zeros(m);
    for i in 0..m {
        k_star[i] = kernel_value(x, expert.inputs.row(i), &expert.hyper, false)?;
    }

    let mean = k_star.dot(&expert.weight_vector);

    let prior_variance = kernel_value(x, x, &expert.hyper, true)?;
    let v = expert
        .chol_factor
        .solve_lower_triangular(&k_star)
        .ok_or_else(|| Error::numerical("triangular solve failed in prediction"))?;
    let explained = v.norm_squared();
    let mut variance = prior_variance - explained;

    if !mean.is_finite() || !variance.is_finite() {
        return Err(Error::numerical("non-finite predictive moments"));
    }
    // The Schur complement is nonnegative in exact arithmetic; keep the
    // floating-point result strictly positive and below the prior.
    if variance <= 0.0 {
        variance = prior_variance * 1e-15;
    }
    variance = variance.min(prior_variance);

    Ok(PredictiveGaussian {
        mean,
        variance,
        prior_variance,
    })
}

/// Log marginal likelihood of the expert's training data:
/// `-0.5 yᵀ K⁻¹ y - Σ log L_ii - (m/2) log 2π`.
pub fn log_marginal_likelihood(expert: &GPExpert) -> f64 {
    let data_fit = -0.5 * expert.targets.dot(&expert.weight_vector);
    let log_det = expert
        .chol_factor
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>();
    let norm = 0.5 * expert.size() as f64 * (2.0 * std::f64::consts::PI).ln();
    data_fit - log_det - norm
}

/// Gradient of the log marginal likelihood with respect to each
/// log-hyperparameter, ordered `[log sf2, log ls_1 .. log ls_D, log sn2]`.
///
/// Uses the trace identity `dLML/dθ = 0.5 tr((w wᵀ - K⁻¹) dK/dθ)` with
/// `dK/d(log θ) = θ dK/dθ`.
pub fn lml_gradient(expert: &GPExpert) -> Vec<f64> {
    let m = expert.size();
    let dim = expert.dim();

    // K⁻¹ = L⁻ᵀ L⁻¹ from the stored factor.
    let identity = DMatrix::identity(m, m);
    let l_inv = expert
        .chol_factor
        .solve_lower_triangular(&identity)
        .expect("stored Cholesky factor has positive diagonal");
    let k_inv = l_inv.transpose() * &l_inv;

    let w = &expert.weight_vector;
    let lengthscales = expert.hyper.lengthscales();
    let sf2 = expert.hyper.signal_variance();
    let sn2 = expert.hyper.noise_variance();

    let mut grad = vec![0.0; dim + 2];
    let mut scaled_sq = vec![0.0; dim];
    for i in 0..m {
        let xi = expert.inputs.row(i);
        for j in 0..=i {
            let xj = expert.inputs.row(j);
            let mut exponent = 0.0;
            for d in 0..dim {
                let r = (xi[d] - xj[d]) / lengthscales[d];
                scaled_sq[d] = r * r;
                exponent += scaled_sq[d];
            }
            let s = sf2 * (-0.5 * exponent).exp();
            let a = w[i] * w[j] - k_inv[(i, j)];
            // Off-diagonal entries appear twice in the symmetric trace.
            let factor = if i == j { a } else { 2.0 * a };

            grad[0] += factor * s;
            for d in 0..dim {
                grad[1 + d] += factor * s * scaled_sq[d];
            }
            if i == j {
                grad[1 + dim] += factor * sn2;
            }
        }
    }
    for g in grad.iter_mut() {
        *g *= 0.5;
    }
    grad
}

pub use crate::optimize::{optimize_hyperparameters, OptimizeOutcome, OptimizerConfig};
