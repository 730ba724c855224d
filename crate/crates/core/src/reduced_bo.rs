//! Bayesian optimization of the canyon objective on a diffusion-map embedding.
//!
//! ```text
//! f(x) = K1 (atan(x2/x1) − π/4)² + K2 (x1² + x2² − 1)²        x1 > 0
//! α(y) = g(y) − κ σ(y) + τ dist(y, Y) / m0
//! ```
//!
//! The loop seeds with a Metropolis–Hastings chain around `x0`, relaxes the
//! seeds to the canyon floor with gradient descent, embeds them with a
//! one-coordinate diffusion map, fits a GP surrogate `g, σ` on the embedding,
//! minimizes `α` on a dense grid, lifts the minimizer back to the plane with
//! per-coordinate GP regression, relaxes and evaluates it, and repeats.  The
//! plain baseline runs the same loop with the identity embedding.

use std::f64::consts::FRAC_PI_4;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dmaps::{fit_dmaps_with, DiffusionModel, DiffusionSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gp::{fit_gp_multi, GpPosterior, GpSpec, DEFAULT_JITTER};
use crate::kernels::{median_heuristic_epsilon, median_in_place, pairwise_distances, KernelSpec, PointSet};
use crate::stats::spearman;

const MAX_HALVINGS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanyonObjective {
    pub k1: f64,
    pub k2: f64,
}

impl Default for CanyonObjective {
    fn default() -> Self {
        Self { k1: 10.0, k2: 50.0 }
    }
}

impl CanyonObjective {
    pub fn new(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 > 0.0 && k2 > 0.0 && k1.is_finite() && k2.is_finite()) {
            return Err(Error::Parameter(format!("canyon constants must be positive, got {k1}, {k2}")));
        }
        Ok(Self { k1, k2 })
    }

    /// The global minimizer `(√2/2)(1, 1)`.
    pub fn minimizer() -> [f64; 2] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        [h, h]
    }

    pub fn in_domain(x: &[f64]) -> bool {
        x.len() == 2 && x[0] > 0.0 && x[0].is_finite() && x[1].is_finite()
    }

    fn guard(x: &[f64]) -> Result<()> {
        if Self::in_domain(x) {
            Ok(())
        } else {
            Err(Error::Domain(x.to_vec()))
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Self::guard(x)?;
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let a = (x[1] / x[0]).atan() - FRAC_PI_4;
        let r = x[0] * x[0] + x[1] * x[1] - 1.0;
        self.k1 * a * a + self.k2 * r * r
    }

    pub fn grad(&self, x: &[f64]) -> Result<[f64; 2]> {
        Self::guard(x)?;
        let (x1, x2) = (x[0], x[1]);
        let rho2 = x1 * x1 + x2 * x2;
        let a = 2.0 * self.k1 * ((x2 / x1).atan() - FRAC_PI_4) / rho2;
        let b = 4.0 * self.k2 * (rho2 - 1.0);
        Ok([-a * x2 + b * x1, a * x1 + b * x2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhParams {
    /// Inverse temperature of the target `exp(-β f)`.
    pub beta: f64,
    /// Standard deviation of the isotropic Gaussian proposal.
    pub step: f64,
    pub burn_in: usize,
}

impl Default for MhParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            step: 0.15,
            burn_in: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhOutput {
    pub samples: PointSet,
    /// Accepted proposals over all steps, burn-in included.
    pub acceptance_rate: f64,
}

pub fn mh_sample<R: Rng + ?Sized>(
    obj: &CanyonObjective,
    x0: &[f64],
    count: usize,
    params: &MhParams,
    rng: &mut R,
) -> Result<MhOutput> {
    if !(params.beta >= 0.0 && params.step >= 0.0) {
        return Err(Error::Parameter(format!(
            "MH needs beta >= 0 and step >= 0, got {} and {}",
            params.beta, params.step
        )));
    }
    if count == 0 {
        return Err(Error::Parameter("MH sample count must be positive".into()));
    }
    let mut x = [x0[0], x0[1]];
    let mut fx = obj.eval(x0)?;
    let total = params.burn_in + count;
    let mut accepted = 0usize;
    let mut out = Vec::with_capacity(count * 2);
    for it in 0..total {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let cand = [x[0] + params.step * z1, x[1] + params.step * z2];
        if CanyonObjective::in_domain(&cand) {
            let fc = obj.eval_unchecked(&cand);
            if u < (-params.beta * (fc - fx)).exp() {
                x = cand;
                fx = fc;
                accepted += 1;
            }
        }
        if it >= params.burn_in {
            out.extend_from_slice(&x);
        }
    }
    Ok(MhOutput {
        samples: PointSet::from_flat(out, 2)?,
        acceptance_rate: accepted as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxParams {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RelaxParams {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelaxOutput {
    pub points: PointSet,
    /// Points whose descent could not stay in the domain after the maximum
    /// number of step halvings; they are left at their last valid position.
    pub stuck: Vec<bool>,
}

/// Gradient descent `x ← x − lr ∇f(x)`.  A step that leaves the domain or
/// raises `f` is halved, at most 20 times.
pub fn relax(obj: &CanyonObjective, points: &PointSet, params: &RelaxParams, exec: Execution) -> Result<RelaxOutput> {
    if !(params.learning_rate > 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {}",
            params.learning_rate
        )));
    }
    if points.dim() != 2 {
        return Err(Error::Input(format!("canyon points are 2-D, got {}", points.dim())));
    }
    for p in points.iter() {
        CanyonObjective::guard(p)?;
    }
    let res = exec.map_range(points.len(), |i| relax_point(obj, points.point(i), params));
    let mut flat = Vec::with_capacity(points.len() * 2);
    let mut stuck = Vec::with_capacity(points.len());
    for (x, s) in res {
        flat.extend_from_slice(&x);
        stuck.push(s);
    }
    Ok(RelaxOutput {
        points: PointSet::from_flat(flat, 2)?,
        stuck,
    })
}

fn relax_point(obj: &CanyonObjective, x0: &[f64], params: &RelaxParams) -> ([f64; 2], bool) {
    let mut x = [x0[0], x0[1]];
    let mut fx = obj.eval_unchecked(&x);
    for _ in 0..params.steps {
        let g = obj.grad(&x).expect("iterate stays in the domain");
        if g == [0.0, 0.0] {
            break;
        }
        let mut t = params.learning_rate;
        let mut in_domain = false;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = [x[0] - t * g[0], x[1] - t * g[1]];
            if CanyonObjective::in_domain(&cand) {
                in_domain = true;
                let fc = obj.eval_unchecked(&cand);
                if fc <= fx {
                    x = cand;
                    fx = fc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !in_domain {
            return (x, true);
        }
        if !moved {
            // No descent left at floating-point resolution.
            break;
        }
    }
    (x, false)
}

/// `g − κσ + τ dist/m0`.
pub fn acquisition(g: f64, sigma: f64, dist: f64, m0: f64, kappa: f64, tau: f64) -> Result<f64> {
    if !(m0 > 0.0) {
        return Err(Error::DegenerateEmbedding(format!(
            "median embedding distance is {m0}; all embedded points coincide"
        )));
    }
    Ok(g - kappa * sigma + tau * dist / m0)
}

/// `count` equally spaced nodes on `[min − r/4, max + r/4]`, `r = max − min`.
pub fn padded_grid(values: &[f64], count: usize) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::DegenerateEmbedding(format!(
            "coordinate range is {range}; cannot build a search grid"
        )));
    }
    if count < 2 {
        return Err(Error::Parameter(format!("grid needs at least 2 nodes, got {count}")));
    }
    let (a, b) = (lo - 0.25 * range, hi + 0.25 * range);
    Ok((0..count)
        .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
        .collect())
}

/// Tensor grid over the padded bounding box of `ps`, with the first axis
/// varying slowest.
pub fn padded_box_grid(ps: &PointSet, count: usize) -> Result<PointSet> {
    let axes: Vec<Vec<f64>> = (0..ps.dim())
        .map(|j| padded_grid(ps.column(j).as_slice(), count))
        .collect::<Result<_>>()?;
    let total = count.pow(ps.dim() as u32);
    let mut flat = Vec::with_capacity(total * ps.dim());
    for idx in 0..total {
        let mut rem = idx;
        let mut node = vec![0.0; ps.dim()];
        for j in (0..ps.dim()).rev() {
            node[j] = axes[j][rem % count];
            rem /= count;
        }
        flat.extend(node);
    }
    PointSet::from_flat(flat, ps.dim())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMin {
    pub index: usize,
    pub point: Vec<f64>,
    pub value: f64,
    /// Grid nodes scored, masked ones included.
    pub evaluations: usize,
}

/// First grid node attaining the minimum score.  `None` scores (masked
/// nodes) and NaNs never win.
pub fn argmin_on_grid<F>(grid: &PointSet, score: F, exec: Execution) -> Result<GridMin>
where
    F: Fn(&[f64]) -> Option<f64> + Send + Sync,
{
    let scores = exec.map_range(grid.len(), |i| score(grid.point(i)).filter(|v| !v.is_nan()));
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    let (index, value) = best.ok_or_else(|| Error::DegenerateEmbedding("no admissible grid node".into()))?;
    Ok(GridMin {
        index,
        point: grid.point(index).to_vec(),
        value,
        evaluations: grid.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionParams {
    pub kappa: f64,
    pub tau: f64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self { kappa: 1.96, tau: 3.0 }
    }
}

/// Minimum distance from `y` to the rows of `observed`.
pub fn distance_to_set(y: &[f64], observed: &PointSet) -> f64 {
    observed
        .iter()
        .map(|p| crate::kernels::squared_distance(y, p))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Median pairwise Euclidean distance.
pub fn median_pairwise_distance(ps: &PointSet) -> f64 {
    let mut d = pairwise_distances(ps).upper_triangle();
    if d.is_empty() {
        return 0.0;
    }
    median_in_place(&mut d)
}

/// A GP surrogate with a constant prior mean.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub posterior: GpPosterior,
    pub offset: f64,
}

impl Surrogate {
    pub fn fit(y: &PointSet, f: &[f64], spec: &GpSpec) -> Result<Self> {
        let offset = crate::stats::mean(f);
        let centred = DMatrix::from_fn(f.len(), 1, |i, _| f[i] - offset);
        Ok(Self {
            posterior: fit_gp_multi(y, &centred, spec)?,
            offset,
        })
    }

    /// Mean and standard deviation at `y`.
    pub fn predict(&self, y: &[f64]) -> Result<(f64, f64)> {
        let m = self.posterior.mean(y)? + self.offset;
        let v = self.posterior.variance(y)?;
        Ok((m, v.max(0.0).sqrt()))
    }
}

/// Grid minimization of the acquisition built from `surrogate`, with
/// distances measured to `observed`.  Nodes rejected by `admissible` are
/// skipped.
pub fn minimize_acquisition<M>(
    surrogate: &Surrogate,
    observed: &PointSet,
    grid: &PointSet,
    params: &AcquisitionParams,
    admissible: M,
    exec: Execution,
) -> Result<GridMin>
where
    M: Fn(&[f64]) -> bool + Send + Sync,
{
    let m0 = median_pairwise_distance(observed);
    acquisition(0.0, 0.0, 0.0, m0, params.kappa, params.tau)?;
    argmin_on_grid(
        grid,
        |y| {
            if !admissible(y) {
                return None;
            }
            let (g, s) = surrogate.predict(y).ok()?;
            acquisition(g, s, distance_to_set(y, observed), m0, params.kappa, params.tau).ok()
        },
        exec,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lifted {
    pub x: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Regresses each ambient coordinate of `x` on the embedding `y` and
/// evaluates the posteriors at `y_star`.  Every coordinate uses its training
/// mean as the prior mean.
pub fn lift(y: &PointSet, x: &PointSet, y_star: &[f64], spec: &GpSpec) -> Result<Lifted> {
    if y.len() != x.len() || y.len() < 2 {
        return Err(Error::Input(format!(
            "lifting needs matching sets of at least 2 points, got {} and {}",
            y.len(),
            x.len()
        )));
    }
    let means: Vec<f64> = (0..x.dim()).map(|c| x.column(c).mean()).collect();
    let targets = DMatrix::from_fn(x.len(), x.dim(), |i, c| x.point(i)[c] - means[c]);
    let post = fit_gp_multi(y, &targets, spec)?;
    let m = post.mean_multi(y_star)?;
    let s = post.variance(y_star)?.max(0.0).sqrt();
    Ok(Lifted {
        x: (0..x.dim()).map(|c| m[c] + means[c]).collect(),
        sigma: vec![s; x.dim()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoConfig {
    pub n0: usize,
    /// Total evaluation budget, seeds included.
    pub n_max: usize,
    pub x0: [f64; 2],
    pub acquisition: AcquisitionParams,
    pub mh: MhParams,
    pub relax: RelaxParams,
    pub embed_dim: usize,
    pub refit_every: usize,
    pub grid_size: usize,
    /// Diffusion-map bandwidth; median heuristic on the ambient points when `None`.
    pub embed_epsilon: Option<f64>,
    /// Surrogate and lift bandwidth; median heuristic on the embedding when `None`.
    pub surrogate_epsilon: Option<f64>,
    pub surrogate_noise: f64,
    pub lift_noise: f64,
    pub jitter: f64,
    /// Relax each lifted point before evaluating it.
    pub relax_new_points: bool,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n0: 50,
            n_max: 80,
            x0: [1.0, 0.0],
            acquisition: AcquisitionParams::default(),
            mh: MhParams::default(),
            relax: RelaxParams::default(),
            embed_dim: 1,
            refit_every: 1,
            grid_size: 401,
            embed_epsilon: None,
            surrogate_epsilon: None,
            surrogate_noise: 1e-8,
            lift_noise: 0.0,
            jitter: DEFAULT_JITTER,
            relax_new_points: true,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n0 < 2 {
            return bad(format!("n0 must be >= 2, got {}", self.n0));
        }
        if self.n_max < self.n0 {
            return bad(format!("n_max {} below n0 {}", self.n_max, self.n0));
        }
        if !(self.acquisition.kappa >= 0.0 && self.acquisition.tau >= 0.0) {
            return bad("kappa and tau must be >= 0".into());
        }
        if !(self.relax.learning_rate > 0.0) {
            return bad("relax learning rate must be positive".into());
        }
        if self.embed_dim != 1 {
            return bad(format!("only a one-coordinate embedding is supported, got {}", self.embed_dim));
        }
        if self.refit_every == 0 {
            return bad("refit_every must be >= 1".into());
        }
        if self.grid_size < 2 {
            return bad("grid_size must be >= 2".into());
        }
        if !(self.surrogate_noise >= 0.0 && self.lift_noise >= 0.0) {
            return bad("noise variances must be >= 0".into());
        }
        if !CanyonObjective::in_domain(&self.x0) {
            return Err(Error::Domain(self.x0.to_vec()));
        }
        for eps in [self.embed_epsilon, self.surrogate_epsilon].into_iter().flatten() {
            KernelSpec::new(eps)?;
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.n_max - self.n0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoMode {
    Reduced,
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub y_star: Vec<f64>,
    pub acquisition: f64,
    pub lifted: Vec<f64>,
    pub lift_sigma: Vec<f64>,
    /// The evaluated point (after relaxation when enabled).
    pub x: [f64; 2],
    pub f: f64,
    pub incumbent_f: f64,
    pub incumbent_x: [f64; 2],
    /// Spearman correlation of the embedding coordinate with the polar angle,
    /// present on iterations that refit the embedding.
    pub spearman: Option<f64>,
    pub grid_evaluations: usize,
    pub m0: f64,
    pub embed_epsilon: f64,
    pub surrogate_epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BoState {
    pub mode: BoMode,
    pub seeds: PointSet,
    pub mh_acceptance: f64,
    pub stuck_seeds: usize,
    /// All evaluated points, seeds first.
    pub x: Vec<[f64; 2]>,
    pub f_vals: Vec<f64>,
    /// Embedding of `x` as of the last iteration, one row per point that
    /// existed at that time.
    pub y: Option<PointSet>,
    pub incumbent: ([f64; 2], f64),
    pub trace: Vec<IterationRecord>,
    /// Set when the loop stopped before exhausting the budget.
    pub aborted: Option<Error>,
}

impl BoState {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }
}

fn points_of(x: &[[f64; 2]]) -> Result<PointSet> {
    PointSet::from_rows(x)
}

/// Spearman correlation of the first embedding coordinate with the polar
/// angle over distinct points.  Repeated states of the seeding chain embed
/// to the same coordinate up to round-off, which would otherwise break the
/// exact ties in the angle.
pub fn distinct_spearman(x: &[[f64; 2]], y: &[Vec<f64>]) -> f64 {
    let mut seen = std::collections::HashSet::new();
    let (mut theta, mut coord) = (Vec::new(), Vec::new());
    for (p, row) in x.iter().zip(y) {
        if seen.insert((p[0].to_bits(), p[1].to_bits())) {
            theta.push(p[1].atan2(p[0]));
            coord.push(row[0]);
        }
    }
    spearman(&coord, &theta)
}

pub fn run_reduced_bo(obj: &CanyonObjective, cfg: &BoConfig) -> Result<BoState> {
    run_bo(obj, cfg, BoMode::Reduced)
}

pub fn run_plain_bo(obj: &CanyonObjective, cfg: &BoConfig) -> Result<BoState> {
    run_bo(obj, cfg, BoMode::Plain)
}

/// Seed points: an MH chain around `x0` followed by relaxation.
pub fn seed_points(obj: &CanyonObjective, cfg: &BoConfig) -> Result<(RelaxOutput, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chain = mh_sample(obj, &cfg.x0, cfg.n0, &cfg.mh, &mut rng)?;
    Ok((relax(obj, &chain.samples, &cfg.relax, cfg.exec)?, chain.acceptance_rate))
}

fn run_bo(obj: &CanyonObjective, cfg: &BoConfig, mode: BoMode) -> Result<BoState> {
    cfg.validate()?;
    let (relaxed, acceptance) = seed_points(obj, cfg)?;
    let x: Vec<[f64; 2]> = relaxed.points.iter().map(|p| [p[0], p[1]]).collect();
    let f_vals: Vec<f64> = x.iter().map(|p| obj.eval(p)).collect::<Result<_>>()?;
    let best = argmin(&f_vals);
    let mut state = BoState {
        mode,
        seeds: relaxed.points.clone(),
        mh_acceptance: acceptance,
        stuck_seeds: relaxed.stuck.iter().filter(|&&s| s).count(),
        incumbent: (x[best], f_vals[best]),
        x,
        f_vals,
        y: None,
        trace: Vec::with_capacity(cfg.iterations()),
        aborted: None,
    };
    let mut model: Option<(DiffusionModel, f64)> = None;
    let mut y_rows: Vec<Vec<f64>> = Vec::new();
    for it in 0..cfg.iterations() {
        match iterate(obj, cfg, mode, it, &mut state, &mut model, &mut y_rows) {
            Ok(rec) => state.trace.push(rec),
            Err(e) => {
                state.aborted = Some(e);
                break;
            }
        }
    }
    Ok(state)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn iterate(
    obj: &CanyonObjective,
    cfg: &BoConfig,
    mode: BoMode,
    it: usize,
    state: &mut BoState,
    model: &mut Option<(DiffusionModel, f64)>,
    y_rows: &mut Vec<Vec<f64>>,
) -> Result<IterationRecord> {
    let xs = points_of(&state.x)?;
    let mut rho = None;
    let embed_eps;
    match mode {
        BoMode::Reduced => {
            if it.is_multiple_of(cfg.refit_every) || model.is_none() {
                let eps = match cfg.embed_epsilon {
                    Some(e) => e,
                    None => median_heuristic_epsilon(&pairwise_distances(&xs))?,
                };
                let spec = DiffusionSpec::new(KernelSpec::new(eps)?, cfg.embed_dim);
                let dm = fit_dmaps_with(&xs, &spec, cfg.exec)?;
                *y_rows = (0..xs.len()).map(|i| dm.coords().row(i).iter().copied().collect()).collect();
                rho = Some(distinct_spearman(&state.x, y_rows));
                *model = Some((dm, eps));
            } else {
                let (dm, _) = model.as_ref().expect("model fitted on the first iteration");
                while y_rows.len() < state.x.len() {
                    let p = state.x[y_rows.len()];
                    y_rows.push(dm.embed_point(&p)?);
                }
            }
            embed_eps = model.as_ref().map(|m| m.1).unwrap_or(f64::NAN);
        }
        BoMode::Plain => {
            *y_rows = state.x.iter().map(|p| p.to_vec()).collect();
            embed_eps = f64::NAN;
        }
    }
    let y = PointSet::from_rows(y_rows)?;
    let m0 = median_pairwise_distance(&y);
    if !(m0 > 0.0) {
        return Err(Error::DegenerateEmbedding("all embedded points coincide".into()));
    }
    let sur_eps = match cfg.surrogate_epsilon {
        Some(e) => e,
        None => median_heuristic_epsilon(&pairwise_distances(&y))?,
    };
    let kernel = KernelSpec::new(sur_eps)?;
    let surrogate = Surrogate::fit(
        &y,
        &state.f_vals,
        &GpSpec::new(kernel, cfg.surrogate_noise).with_jitter(cfg.jitter),
    )?;
    let grid = padded_box_grid(&y, cfg.grid_size)?;
    let min = match mode {
        BoMode::Reduced => minimize_acquisition(&surrogate, &y, &grid, &cfg.acquisition, |_| true, cfg.exec)?,
        BoMode::Plain => minimize_acquisition(
            &surrogate,
            &y,
            &grid,
            &cfg.acquisition,
            CanyonObjective::in_domain,
            cfg.exec,
        )?,
    };
    let (lifted, lift_sigma) = match mode {
        BoMode::Reduced => {
            let l = lift(&y, &xs, &min.point, &GpSpec::new(kernel, cfg.lift_noise).with_jitter(cfg.jitter))?;
            (l.x, l.sigma)
        }
        BoMode::Plain => (min.point.clone(), vec![0.0; 2]),
    };
    CanyonObjective::guard(&lifted)?;
    let x_new = if cfg.relax_new_points {
        let r = relax(obj, &PointSet::from_flat(lifted.clone(), 2)?, &cfg.relax, Execution::Sequential)?;
        [r.points.point(0)[0], r.points.point(0)[1]]
    } else {
        [lifted[0], lifted[1]]
    };
    let f_new = obj.eval(&x_new)?;
    state.x.push(x_new);
    state.f_vals.push(f_new);
    if f_new < state.incumbent.1 {
        state.incumbent = (x_new, f_new);
    }
    state.y = Some(y);
    Ok(IterationRecord {
        iteration: it + 1,
        y_star: min.point,
        acquisition: min.value,
        lifted,
        lift_sigma,
        x: x_new,
        f: f_new,
        incumbent_f: state.incumbent.1,
        incumbent_x: state.incumbent.0,
        spearman: rho,
        grid_evaluations: min.evaluations,
        m0,
        embed_epsilon: embed_eps,
        surrogate_epsilon: sur_eps,
    })
}

/// Evaluates `f` on the rows of a point set.
pub fn eval_batch(obj: &CanyonObjective, ps: &PointSet) -> Result<DVector<f64>> {
    let v: Vec<f64> = ps.iter().map(|p| obj.eval(p)).collect::<Result<_>>()?;
    Ok(DVector::from_vec(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_values() {
        let obj = CanyonObjective::default();
        assert!(obj.eval(&CanyonObjective::minimizer()).unwrap().abs() < 1e-15);
        assert!((obj.eval(&[1.0, 0.0]).unwrap() - 10.0 * FRAC_PI_4 * FRAC_PI_4).abs() < 1e-12);
        assert!((obj.eval(&[1.0, 0.0]).unwrap() - 6.168503).abs() < 1e-6);
        let two = [2.0 * FRAC_PI_4.cos(), 2.0 * FRAC_PI_4.sin()];
        assert!((obj.eval(&two).unwrap() - 450.0).abs() < 1e-9);
        assert!(matches!(obj.eval(&[0.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(obj.grad(&[-1.0, 1.0]), Err(Error::Domain(_))));
        assert!(CanyonObjective::new(0.0, 1.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let obj = CanyonObjective::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..10 {
            let x = [rng.random_range(0.2..1.5), rng.random_range(-1.0..1.5)];
            let g = obj.grad(&x).unwrap();
            for c in 0..2 {
                let mut p = x;
                let mut m = x;
                p[c] += h;
                m[c] -= h;
                let fd = (obj.eval(&p).unwrap() - obj.eval(&m).unwrap()) / (2.0 * h);
                assert!((fd - g[c]).abs() <= 1e-5 * g[c].abs().max(1.0), "{fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn mh_limits() {
        let obj = CanyonObjective::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat = MhParams {
            beta: 0.0,
            step: 0.01,
            burn_in: 10,
        };
        let out = mh_sample(&obj, &[1.0, 0.0], 2000, &flat, &mut rng).unwrap();
        assert!(out.acceptance_rate >= 0.95);
        let frozen = MhParams { step: 0.0, ..flat };
        let out = mh_sample(&obj, &[1.0, 0.0], 50, &frozen, &mut rng).unwrap();
        assert!(out.samples.iter().all(|p| p == [1.0, 0.0]));
        assert!(mh_sample(&obj, &[-1.0, 0.0], 5, &flat, &mut rng).is_err());
    }

    #[test]
    fn mh_temperature_ordering_and_determinism() {
        let obj = CanyonObjective::default();
        let mean_f = |beta: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let p = MhParams { beta, ..MhParams::default() };
            let out = mh_sample(&obj, &[1.0, 0.0], 5000, &p, &mut rng).unwrap();
            eval_batch(&obj, &out.samples).unwrap().mean()
        };
        assert!(mean_f(5.0) < mean_f(0.5));
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            mh_sample(&obj, &[1.0, 0.0], 100, &MhParams::default(), &mut rng).unwrap().samples
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn relax_cases() {
        let obj = CanyonObjective::default();
        let params = RelaxParams {
            steps: 1,
            learning_rate: 1e-3,
        };
        let star = PointSet::from_rows(&[CanyonObjective::minimizer()]).unwrap();
        let out = relax(&obj, &star, &params, Execution::Sequential).unwrap();
        assert_eq!(out.points, star);
        let start = [1.0, 0.0];
        let g = obj.grad(&start).unwrap();
        let out = relax(&obj, &PointSet::from_rows(&[start]).unwrap(), &params, Execution::Sequential).unwrap();
        assert_eq!(out.points.point(0), &[1.0 - 1e-3 * g[0], -1e-3 * g[1]]);
        assert_eq!(out.stuck, vec![false]);
    }

    #[test]
    fn relax_descends_every_step() {
        let obj = CanyonObjective::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seeds = mh_sample(&obj, &[1.0, 0.0], 50, &MhParams::default(), &mut rng).unwrap().samples;
        let one = RelaxParams {
            steps: 1,
            learning_rate: 1e-3,
        };
        let mut cur = seeds.clone();
        for _ in 0..100 {
            let before = eval_batch(&obj, &cur).unwrap();
            cur = relax(&obj, &cur, &one, Execution::Sequential).unwrap().points;
            let after = eval_batch(&obj, &cur).unwrap();
            for i in 0..50 {
                assert!(after[i] <= before[i]);
            }
        }
    }

    #[test]
    fn relaxed_seeds_sit_on_the_canyon_floor() {
        let obj = CanyonObjective::default();
        let (out, _) = seed_points(&obj, &BoConfig::default()).unwrap();
        let near = out.points.iter().filter(|p| ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() <= 0.02).count();
        assert!(near as f64 >= 0.95 * out.points.len() as f64);
        assert!(out.stuck.iter().all(|s| !s));
    }

    #[test]
    fn acquisition_cases() {
        assert_eq!(acquisition(0.7, 3.0, 2.0, 1.0, 0.0, 0.0).unwrap(), 0.7);
        assert_eq!(acquisition(0.7, 0.5, 0.0, 1.0, 2.0, 3.0).unwrap(), 0.7 - 1.0);
        assert!((acquisition(0.0, 1.0, 0.4, 0.4, 1.96, 3.0).unwrap() - 1.04).abs() < 1e-12);
        assert!(matches!(
            acquisition(0.0, 1.0, 0.0, 0.0, 1.0, 1.0),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn grid_tie_break_and_vertex() {
        let grid = PointSet::from_scalars(&padded_grid(&[0.0, 1.0], 101).unwrap()).unwrap();
        let flat = argmin_on_grid(&grid, |_| Some(1.0), Execution::default()).unwrap();
        assert_eq!(flat.index, 0);
        assert_eq!(flat.point, vec![-0.25]);
        let vertex = 0.337;
        let q = argmin_on_grid(&grid, |y| Some((y[0] - vertex).powi(2)), Execution::default()).unwrap();
        let nearest = (0..grid.len())
            .min_by(|&a, &b| {
                (grid.point(a)[0] - vertex)
                    .abs()
                    .total_cmp(&(grid.point(b)[0] - vertex).abs())
            })
            .unwrap();
        assert_eq!(q.index, nearest);
        assert!(padded_grid(&[1.0, 1.0], 10).is_err());
    }

    #[test]
    fn single_point_surrogate_argmin_matches_exhaustive_search() {
        let y = PointSet::from_scalars(&[0.0, 1.0]).unwrap();
        let sur = Surrogate::fit(&y, &[0.0, 0.0], &GpSpec::new(KernelSpec::new(0.05).unwrap(), 0.0)).unwrap();
        let params = AcquisitionParams { kappa: 50.0, tau: 3.0 };
        let grid = PointSet::from_scalars(&padded_grid(&[0.0, 1.0], 401).unwrap()).unwrap();
        let got = minimize_acquisition(&sur, &y, &grid, &params, |_| true, Execution::default()).unwrap();
        let m0 = median_pairwise_distance(&y);
        let mut best = (0, f64::INFINITY);
        for i in 0..grid.len() {
            let (g, s) = sur.predict(grid.point(i)).unwrap();
            let a = acquisition(g, s, distance_to_set(grid.point(i), &y), m0, 50.0, 3.0).unwrap();
            if a < best.1 {
                best = (i, a);
            }
        }
        assert_eq!(got.index, best.0);
        assert_eq!(got.value, best.1);
    }

    #[test]
    fn distance_term_vanishes_only_on_observed_points() {
        let y = PointSet::from_scalars(&[0.0, 0.5, 1.0]).unwrap();
        let grid = padded_grid(&[0.0, 1.0], 401).unwrap();
        for g in grid {
            let d = distance_to_set(&[g], &y);
            let on = [0.0, 0.5, 1.0].contains(&g);
            assert_eq!(d == 0.0, on);
        }
    }

    #[test]
    fn lift_interpolates_and_tracks_the_arc() {
        let n = 20;
        let t: Vec<f64> = (0..n).map(|i| 0.1 + 1.2 * i as f64 / (n - 1) as f64).collect();
        let x = PointSet::from_rows(&t.iter().map(|a| [a.cos(), a.sin()]).collect::<Vec<_>>()).unwrap();
        let y = PointSet::from_scalars(&t).unwrap();
        let spec = GpSpec::new(KernelSpec::new(median_heuristic_epsilon(&pairwise_distances(&y)).unwrap()).unwrap(), 0.0);
        for i in [0, 7, 19] {
            let l = lift(&y, &x, y.point(i), &spec).unwrap();
            assert!((l.x[0] - x.point(i)[0]).abs() < 1e-6 && (l.x[1] - x.point(i)[1]).abs() < 1e-6);
            assert!(l.sigma.iter().all(|&s| s <= 1e-3));
        }
        let mid = 0.5 * (t[4] + t[5]);
        let l = lift(&y, &x, &[mid], &spec).unwrap();
        let d = ((l.x[0] - mid.cos()).powi(2) + (l.x[1] - mid.sin()).powi(2)).sqrt();
        assert!(d < 0.05);
    }

    #[test]
    fn empty_budget_returns_best_seed() {
        let obj = CanyonObjective::default();
        let cfg = BoConfig {
            n_max: 50,
            ..BoConfig::default()
        };
        for state in [run_reduced_bo(&obj, &cfg).unwrap(), run_plain_bo(&obj, &cfg).unwrap()] {
            assert!(state.trace.is_empty());
            let best = state.f_vals.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(state.incumbent.1, best);
        }
    }

    #[test]
    fn repeated_points_count_once() {
        let x = [[1.0, 0.0], [1.0, 0.1], [1.0, 0.1], [1.0, 0.2]];
        let y = [vec![0.0], vec![1.0], vec![1.0 + 1e-16], vec![2.0]];
        assert_eq!(distinct_spearman(&x, &y), 1.0);
    }

    #[test]
    fn median_distance_of_a_line() {
        let ps = PointSet::from_scalars(&[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(median_pairwise_distance(&ps), 2.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            BoConfig { n0: 1, ..BoConfig::default() },
            BoConfig { n_max: 10, ..BoConfig::default() },
            BoConfig { refit_every: 0, ..BoConfig::default() },
            BoConfig { x0: [-1.0, 0.0], ..BoConfig::default() },
            BoConfig { embed_dim: 2, ..BoConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn short_runs_are_monotone_and_count_grid_nodes() {
        let obj = CanyonObjective::default();
        let cfg = BoConfig {
            n_max: 54,
            grid_size: 41,
            ..BoConfig::default()
        };
        let red = run_reduced_bo(&obj, &cfg).unwrap();
        let plain = run_plain_bo(&obj, &cfg).unwrap();
        for s in [&red, &plain] {
            assert!(s.is_complete(), "{:?}", s.aborted);
            assert_eq!(s.trace.len(), 4);
            for w in s.trace.windows(2) {
                assert!(w[1].incumbent_f <= w[0].incumbent_f);
            }
            assert!(s.x.iter().all(|p| CanyonObjective::in_domain(p)));
        }
        assert!(red.trace.iter().all(|r| r.grid_evaluations == 41));
        assert!(plain.trace.iter().all(|r| r.grid_evaluations == 41 * 41));
        assert!(red.trace.iter().all(|r| r.spearman.is_some()));
        let again = run_reduced_bo(&obj, &cfg).unwrap();
        assert_eq!(red.trace, again.trace);
    }

    #[test]
    fn nystrom_between_refits() {
        let obj = CanyonObjective::default();
        let cfg = BoConfig {
            n_max: 54,
            grid_size: 41,
            refit_every: 3,
            ..BoConfig::default()
        };
        let s = run_reduced_bo(&obj, &cfg).unwrap();
        assert!(s.is_complete(), "{:?}", s.aborted);
        let refits: Vec<bool> = s.trace.iter().map(|r| r.spearman.is_some()).collect();
        assert_eq!(refits, vec![true, false, false, true]);
    }
}
