//! Gaussian-process regression with a squared-exponential prior, Karhunen–Loève
//! sampling and the conditional KL expansion.
//!
//! ```text
//! μ*  = k(x*, X) (K + s I)⁻¹ f
//! Σ*  = k(x*, x*) − k(x*, X) (K + s I)⁻¹ k(X, x*)
//! ```
//!
//! where `s` is the noise variance, or the jitter when the noise variance is
//! zero.  The factorization is a dense Cholesky decomposition cached at fit
//! time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kernels::{cross_kernel, kernel_matrix_from_points, KernelSpec, PointSet};
use crate::spectral::EigenSystem;

pub const DEFAULT_JITTER: f64 = 1e-10;
pub const MAX_JITTER: f64 = 1e-6;
/// Eigenvalues at or below this fraction of the largest are treated as zero
/// when extending basis functions.
pub const EXTENSION_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpSpec {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    /// Diagonal regularizer used only when `noise_variance == 0`.
    pub jitter: f64,
}

impl GpSpec {
    pub fn new(kernel: KernelSpec, noise_variance: f64) -> Self {
        Self {
            kernel,
            noise_variance,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        validate_noise(self.noise_variance, self.jitter)
    }

    /// The diagonal term actually added to `K`.
    pub fn effective_noise(&self) -> f64 {
        effective_noise(self.noise_variance, self.jitter)
    }
}

fn validate_noise(noise: f64, jitter: f64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Parameter(format!("noise variance must be >= 0, got {noise}")));
    }
    if !(0.0..=MAX_JITTER).contains(&jitter) {
        return Err(Error::Parameter(format!(
            "jitter must lie in [0, {MAX_JITTER:e}], got {jitter}"
        )));
    }
    Ok(())
}

fn effective_noise(noise: f64, jitter: f64) -> f64 {
    if noise == 0.0 {
        jitter
    } else {
        noise
    }
}

/// A fitted GP posterior.  Cheap to query: `O(N)` for the mean and `O(N²)`
/// for the variance.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    /// `None` when fitted from a precomputed kernel matrix.
    train: Option<PointSet>,
    kernel: Option<KernelSpec>,
    noise_variance: f64,
    jitter: f64,
    f_train: DMatrix<f64>,
    /// Lower Cholesky factor of `K + sI`.
    chol_l: DMatrix<f64>,
    /// `(K + sI)⁻¹ f`, one column per output.
    weights: DMatrix<f64>,
}

pub fn fit_gp(ps: &PointSet, f: &DVector<f64>, spec: &GpSpec) -> Result<GpPosterior> {
    fit_gp_multi(ps, &column(f), spec)
}

/// One posterior per column of `f`, sharing the factorization.
pub fn fit_gp_multi(ps: &PointSet, f: &DMatrix<f64>, spec: &GpSpec) -> Result<GpPosterior> {
    spec.validate()?;
    let k = kernel_matrix_from_points(ps, &spec.kernel)?;
    let mut post = GpPosterior::from_kernel_multi(&k, f, spec.noise_variance, spec.jitter)?;
    post.train = Some(ps.clone());
    post.kernel = Some(spec.kernel);
    Ok(post)
}

fn column(f: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(f.len(), 1, f.as_slice())
}

impl GpPosterior {
    /// Posterior of a GP whose training covariance is the given matrix.
    /// Queries must then supply their own cross-covariance vectors.
    pub fn from_kernel(k: &DMatrix<f64>, f: &DVector<f64>, noise_variance: f64, jitter: f64) -> Result<Self> {
        Self::from_kernel_multi(k, &column(f), noise_variance, jitter)
    }

    pub fn from_kernel_multi(
        k: &DMatrix<f64>,
        f: &DMatrix<f64>,
        noise_variance: f64,
        jitter: f64,
    ) -> Result<Self> {
        validate_noise(noise_variance, jitter)?;
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::Input(format!(
                "covariance must be square and non-empty, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        if f.nrows() != n || f.ncols() == 0 {
            return Err(Error::Input(format!("{} targets for {n} training points", f.nrows())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite training targets".into()));
        }
        let s = effective_noise(noise_variance, jitter);
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += s;
        }
        let chol = a.cholesky().ok_or_else(|| {
            Error::Conditioning(format!(
                "Cholesky factorization of K + {s:e} I failed; raise the jitter or the noise variance"
            ))
        })?;
        let weights = chol.solve(f);
        Ok(Self {
            train: None,
            kernel: None,
            noise_variance,
            jitter,
            f_train: f.clone(),
            chol_l: chol.unpack(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.chol_l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn train(&self) -> Option<&PointSet> {
        self.train.as_ref()
    }

    pub fn f_train(&self) -> &DMatrix<f64> {
        &self.f_train
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn effective_noise(&self) -> f64 {
        effective_noise(self.noise_variance, self.jitter)
    }

    /// Applies `(K + sI)⁻¹` to an arbitrary right-hand side.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(b.len())?;
        let y = self.forward(b);
        let mut x = y;
        self.chol_l.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        self.chol_l.solve_lower_triangular_mut(&mut y);
        y
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::Input(format!(
                "cross-covariance of length {len} for {} training points",
                self.len()
            )));
        }
        Ok(())
    }

    fn kstar(&self, query: &[f64]) -> Result<(DVector<f64>, f64)> {
        match (&self.train, &self.kernel) {
            (Some(train), Some(spec)) => Ok((cross_kernel(train, query, spec)?, 1.0)),
            _ => Err(Error::Input(
                "posterior was fitted from a kernel matrix; query with a cross-covariance vector".into(),
            )),
        }
    }

    pub fn mean_from_kstar(&self, kstar: &DVector<f64>) -> Result<f64> {
        self.check_len(kstar.len())?;
        Ok(kstar.dot(&self.weights.column(0)))
    }

    pub fn mean_multi_from_kstar(&self, kstar: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(kstar.len())?;
        Ok(self.weights.tr_mul(kstar))
    }

    /// `kss − k*ᵀ(K + sI)⁻¹k*`; does not depend on the training targets.
    pub fn variance_from_kstar(&self, kstar: &DVector<f64>, kss: f64) -> Result<f64> {
        self.check_len(kstar.len())?;
        Ok(kss - self.forward(kstar).norm_squared())
    }

    pub fn mean(&self, query: &[f64]) -> Result<f64> {
        let (ks, _) = self.kstar(query)?;
        self.mean_from_kstar(&ks)
    }

    pub fn mean_multi(&self, query: &[f64]) -> Result<DVector<f64>> {
        let (ks, _) = self.kstar(query)?;
        self.mean_multi_from_kstar(&ks)
    }

    pub fn variance(&self, query: &[f64]) -> Result<f64> {
        let (ks, kss) = self.kstar(query)?;
        self.variance_from_kstar(&ks, kss)
    }

    /// Mean and variance of the first output at every query point.
    pub fn predict_batch(&self, queries: &PointSet, exec: Execution) -> Result<Vec<(f64, f64)>> {
        exec.map_range(queries.len(), |i| {
            let (ks, kss) = self.kstar(queries.point(i))?;
            Ok((self.mean_from_kstar(&ks)?, self.variance_from_kstar(&ks, kss)?))
        })
        .into_iter()
        .collect()
    }

    fn log_det(&self) -> f64 {
        2.0 * self.chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    fn quad_form(&self) -> f64 {
        self.f_train.column(0).dot(&self.weights.column(0))
    }

    /// Gaussian log evidence of the first output column.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        -0.5 * (self.quad_form() + self.log_det() + n * LN_2PI)
    }

    /// Maximum-likelihood amplitude `a` for the covariance `a (K + sI)`.
    pub fn profiled_signal_variance(&self) -> f64 {
        self.quad_form() / self.len() as f64
    }

    /// Log evidence with the amplitude set to its maximum-likelihood value.
    pub fn profiled_log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let a = self.profiled_signal_variance();
        -0.5 * n - 0.5 * n * a.ln() - 0.5 * self.log_det() - 0.5 * n * LN_2PI
    }
}

pub fn gp_mean(post: &GpPosterior, query: &[f64]) -> Result<f64> {
    post.mean(query)
}

pub fn gp_variance(post: &GpPosterior, query: &[f64]) -> Result<f64> {
    post.variance(query)
}

pub fn log_marginal_likelihood(post: &GpPosterior) -> f64 {
    post.log_marginal_likelihood()
}

/// `per_decade` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && per_decade > 0) {
        return Err(Error::Parameter(format!(
            "bad log grid [{lo}, {hi}] with {per_decade} steps per decade"
        )));
    }
    let (a, b) = (lo.log10(), hi.log10());
    let steps = ((b - a) * per_decade as f64).round() as usize;
    Ok((0..=steps)
        .map(|i| {
            if steps == 0 {
                lo
            } else {
                10f64.powf(a + (b - a) * i as f64 / steps as f64)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evidence {
    /// Unit signal amplitude.
    Plain,
    /// Signal amplitude maximized out analytically.
    ProfiledAmplitude,
}

/// Result of a grid search over the noise variance.
#[derive(Debug, Clone)]
pub struct NoiseSelection {
    pub noise_variance: f64,
    pub log_evidence: f64,
    /// `(noise, log evidence)` over the grid; failed factorizations are skipped.
    pub scores: Vec<(f64, f64)>,
}

pub fn select_noise(
    k: &DMatrix<f64>,
    f: &DVector<f64>,
    grid: &[f64],
    evidence: Evidence,
    exec: Execution,
) -> Result<NoiseSelection> {
    let scores: Vec<(f64, f64)> = exec
        .map_range(grid.len(), |i| {
            let post = GpPosterior::from_kernel(k, f, grid[i], DEFAULT_JITTER).ok()?;
            let score = match evidence {
                Evidence::Plain => post.log_marginal_likelihood(),
                Evidence::ProfiledAmplitude => post.profiled_log_marginal_likelihood(),
            };
            score.is_finite().then_some((grid[i], score))
        })
        .into_iter()
        .flatten()
        .collect();
    let best = scores
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |acc, c| match acc {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Conditioning("no noise level on the grid gave a finite evidence".into()))?;
    Ok(NoiseSelection {
        noise_variance: best.0,
        log_evidence: best.1,
        scores,
    })
}

/// Draws `n_samples` realizations of `Σ_{n<r} √σ_n v_n ξ_n`, one per column.
pub fn sample_kl<R: Rng + ?Sized>(
    es: &EigenSystem,
    r: usize,
    rng: &mut R,
    n_samples: usize,
) -> Result<DMatrix<f64>> {
    let positive = es.positive_count();
    if r == 0 || r > positive {
        return Err(Error::Parameter(format!(
            "truncation {r} outside 1..={positive} positive eigenvalues"
        )));
    }
    let n = es.len();
    let mut out = DMatrix::zeros(n, n_samples);
    for s in 0..n_samples {
        for j in 0..r {
            let xi: f64 = rng.sample(StandardNormal);
            let scale = es.value(j).sqrt() * xi;
            let v = es.vector(j);
            for i in 0..n {
                out[(i, s)] += scale * v[i];
            }
        }
    }
    Ok(out)
}

/// Posterior of the KL coefficients `ξ` given noisy observations
/// `y = f(X) + η` of a process with covariance `M = V Λ Vᵀ`.
///
/// Since `M` is diagonal in its own eigenbasis,
/// `Λ^½ Φ (M + sI)⁻¹ = diag(√λ_n/(λ_n + s)) Φ` exactly, so the mean and the
/// covariance come straight from the projections `Φ y`.
#[derive(Debug, Clone)]
pub struct ConditionalKlModel {
    pub lambdas: DVector<f64>,
    /// `r × N`, row `n` holds `φ_n(x_j)`.
    pub phi: DMatrix<f64>,
    pub mu_xi: DVector<f64>,
    pub c_xi: DMatrix<f64>,
    /// Effective noise variance (jitter included when applied).
    pub sigma2: f64,
}

pub fn conditional_kl(
    es: &EigenSystem,
    r: usize,
    y: &DVector<f64>,
    sigma2: f64,
    jitter: f64,
) -> Result<ConditionalKlModel> {
    validate_noise(sigma2, jitter)?;
    let n = es.len();
    if y.len() != n {
        return Err(Error::Input(format!("{} observations for {n} points", y.len())));
    }
    if r == 0 || r > n {
        return Err(Error::Parameter(format!("truncation {r} outside 1..={n}")));
    }
    let singular = es.values().iter().any(|&v| v <= 0.0);
    let s = if sigma2 == 0.0 && singular { jitter } else { sigma2 };
    if let Some(j) = (0..n).find(|&j| es.value(j) + s <= 0.0) {
        return Err(Error::Conditioning(format!(
            "M + {s:e} I is singular at eigenvalue {}; raise the jitter",
            es.value(j)
        )));
    }
    let lambdas = DVector::from_fn(r, |j, _| es.value(j));
    let phi = DMatrix::from_fn(r, n, |j, i| es.vectors()[(i, j)]);
    let proj = &phi * y;
    let mu_xi = DVector::from_fn(r, |j, _| lambdas[j].sqrt() * proj[j] / (lambdas[j] + s));
    let c_xi = DMatrix::from_diagonal(&DVector::from_fn(r, |j, _| s / (lambdas[j] + s)));
    Ok(ConditionalKlModel {
        lambdas,
        phi,
        mu_xi,
        c_xi,
        sigma2: s,
    })
}

impl ConditionalKlModel {
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    /// Coefficients `f_n = √λ_n E[ξ̃_n]`.
    pub fn coefficients(&self) -> DVector<f64> {
        DVector::from_fn(self.rank(), |j, _| self.lambdas[j].sqrt() * self.mu_xi[j])
    }

    /// `E[f̃(x_i)]` at every training point.
    pub fn training_mean(&self) -> DVector<f64> {
        self.phi.tr_mul(&self.coefficients())
    }
}

/// Nyström values `φ_n(x*) = v_nᵀ k* / σ_n` of the first `r` eigenfunctions
/// of the covariance whose training matrix has eigensystem `es`.
pub fn nystrom_basis(es: &EigenSystem, r: usize, kstar: &DVector<f64>) -> Result<DVector<f64>> {
    if kstar.len() != es.len() {
        return Err(Error::Input(format!(
            "cross-covariance of length {} for {} points",
            kstar.len(),
            es.len()
        )));
    }
    if r > es.len() {
        return Err(Error::Parameter(format!("truncation {r} exceeds {}", es.len())));
    }
    let tol = EXTENSION_TOL * es.largest();
    let mut out = DVector::zeros(r);
    for j in 0..r {
        let s = es.value(j);
        if s <= tol {
            return Err(Error::IllPosedExtension { index: j, eigenvalue: s });
        }
        out[j] = es.vector(j).dot(kstar) / s;
    }
    Ok(out)
}

/// `E[f̃(x*)] = Σ_n f_n φ_n(x*)` given the extended basis values at `x*`.
pub fn kl_posterior_mean(model: &ConditionalKlModel, basis_star: &DVector<f64>) -> Result<f64> {
    if basis_star.len() != model.rank() {
        return Err(Error::Input(format!(
            "{} basis values for a rank-{} model",
            basis_star.len(),
            model.rank()
        )));
    }
    Ok(model.coefficients().dot(basis_star))
}
