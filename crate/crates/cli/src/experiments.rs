//! The experiment registry.  Each experiment turns resolved parameters and a
//! seed into CSV tables plus a few derived scalars for the manifest.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value as Json};

use gpgh::gh::{fit_gh, GhModel};
use gpgh::gp::{
    fit_gp, log_grid, sample_kl, select_noise, Evidence, GpPosterior, GpSpec, DEFAULT_JITTER,
};
use gpgh::kernels::{
    cross_kernel, cross_kernel_from_distances, kernel_matrix, kernel_matrix_from_points_with,
    squared_distance, DistanceMatrix, KernelSpec, PointSet,
};
use gpgh::reduced_bo::{
    run_plain_bo, run_reduced_bo, AcquisitionParams, BoConfig, BoState, CanyonObjective, MhParams,
    RelaxParams,
};
use gpgh::spectral::{eig_sym_psd, filter_table, regularized_solve, RegularizationSpec};
use gpgh::{Error, Execution};

use crate::config::{Kind, ParamSpec, Params};
use crate::datasets::{circle_gap, sine, two_segment};
use crate::output::{Cell, Table};

#[derive(Debug)]
pub enum RunError {
    /// Parameters that pass parsing but are rejected by the numerics.
    Config(String),
    Numeric(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(m) => RunError::Config(m),
            other => RunError::Numeric(other),
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "invalid parameter: {m}"),
            RunError::Numeric(e) => write!(f, "{e}"),
        }
    }
}

pub struct Outcome {
    pub tables: Vec<(&'static str, Table)>,
    pub derived: Map<String, Json>,
}

pub type RunFn = fn(&Params, u64, Execution) -> Result<Outcome, RunError>;

pub struct ExperimentDef {
    pub name: &'static str,
    pub figure: &'static str,
    pub about: &'static str,
    pub params: &'static [ParamSpec],
    pub run: RunFn,
}

pub static EXPERIMENTS: &[ExperimentDef] = &[
    ExperimentDef {
        name: "circle-gap",
        figure: "Figure 2",
        about: "GP variance and GH error estimate around a circle with a gap",
        params: CIRCLE_GAP_PARAMS,
        run: run_circle_gap,
    },
    ExperimentDef {
        name: "latent-agreement",
        figure: "Figure 3",
        about: "error estimates from geodesic distances in the plane and arclength on the line",
        params: LATENT_PARAMS,
        run: run_latent,
    },
    ExperimentDef {
        name: "inductive-bias",
        figure: "Figures 4 and 5",
        about: "true error vs estimated uncertainty over a gap for a smooth and an oscillatory target",
        params: BIAS_PARAMS,
        run: run_bias,
    },
    ExperimentDef {
        name: "filters",
        figure: "Figure 6",
        about: "truncation vs ridge spectral filter factors and their convergence",
        params: FILTER_PARAMS,
        run: run_filters,
    },
    ExperimentDef {
        name: "bo-reduced",
        figure: "Figures 1, A.6 and A.7",
        about: "Bayesian optimization of the canyon objective on a diffusion-map coordinate",
        params: BO_PARAMS,
        run: run_bo_reduced,
    },
    ExperimentDef {
        name: "bo-plain",
        figure: "Figure A.7 (baseline)",
        about: "the same loop with the identity embedding on a 2-D grid",
        params: BO_PARAMS,
        run: run_bo_plain,
    },
    ExperimentDef {
        name: "kl-sample",
        figure: "none (KL expansion check)",
        about: "Karhunen-Loeve samples of a circle kernel and their empirical covariance",
        params: KL_PARAMS,
        run: run_kl,
    },
];

pub fn find(name: &str) -> Option<&'static ExperimentDef> {
    EXPERIMENTS.iter().find(|e| e.name == name)
}

pub fn schema(name: &str) -> Option<&'static [ParamSpec]> {
    find(name).map(|e| e.params)
}

const fn p(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        default,
        help,
    }
}

fn derived() -> Map<String, Json> {
    Map::new()
}

fn u32_param(params: &Params, key: &str) -> Result<u32, RunError> {
    u32::try_from(params.uint(key)).map_err(|_| RunError::Config(format!("{key} is too large")))
}

// ---------------------------------------------------------------- circle-gap

static CIRCLE_GAP_PARAMS: &[ParamSpec] = &[
    p("n", Kind::UInt, "120", "training points on the circle"),
    p("gap_deg", Kind::Float, "60", "width of the missing arc centred on 180 degrees"),
    p("epsilon", Kind::Float, "0.1", "kernel bandwidth"),
    p("noise_variance", Kind::Float, "0", "GP noise variance"),
    p("jitter", Kind::Float, "1e-10", "diagonal jitter used when noise_variance = 0"),
    p("delta", Kind::Float, "0", "GH truncation ratio"),
    p("clamp_tol", Kind::Float, "1e-12", "relative eigenvalue clamp"),
    p("queries", Kind::UInt, "721", "query angles over the full circle"),
    p("gap_queries", Kind::UInt, "241", "query angles across the gap"),
    p("widths", Kind::FloatList, "30,60,90", "gap widths for the gap-centre sweep"),
];

#[derive(Debug, Clone, Copy)]
pub struct CircleGapSettings {
    pub n: usize,
    pub gap_deg: f64,
    pub epsilon: f64,
    pub noise_variance: f64,
    pub jitter: f64,
    pub delta: f64,
    pub clamp_tol: f64,
}

impl Default for CircleGapSettings {
    fn default() -> Self {
        Self {
            n: 120,
            gap_deg: 60.0,
            epsilon: 0.1,
            noise_variance: 0.0,
            jitter: DEFAULT_JITTER,
            delta: 0.0,
            clamp_tol: 1e-12,
        }
    }
}

impl CircleGapSettings {
    fn from_params(p: &Params) -> Self {
        Self {
            n: p.usize("n"),
            gap_deg: p.float("gap_deg"),
            epsilon: p.float("epsilon"),
            noise_variance: p.float("noise_variance"),
            jitter: p.float("jitter"),
            delta: p.float("delta"),
            clamp_tol: p.float("clamp_tol"),
        }
    }
}

/// GP posterior and GH model fitted to the same circle-gap dataset.
pub struct GapEstimators {
    pub train: PointSet,
    pub kernel: KernelSpec,
    pub gp: GpPosterior,
    pub gh: GhModel,
}

impl GapEstimators {
    pub fn fit(s: &CircleGapSettings, exec: Execution) -> Result<Self, Error> {
        let (train, angles) = circle_gap(s.n, s.gap_deg)?;
        let kernel = KernelSpec::new(s.epsilon)?;
        let f = DVector::from_iterator(s.n, angles.iter().map(|t| t.sin()));
        let gp = fit_gp(&train, &f, &GpSpec::new(kernel, s.noise_variance).with_jitter(s.jitter))?;
        let k = kernel_matrix_from_points_with(&train, &kernel, exec)?;
        let es = eig_sym_psd(&k, s.clamp_tol)?;
        let gh = fit_gh(&es, &f, s.delta)?;
        Ok(Self {
            train,
            kernel,
            gp,
            gh,
        })
    }

    /// `(gp_variance, gh_error)` at the circle point with angle `t`.
    pub fn at_angle(&self, t: f64) -> Result<(f64, f64), Error> {
        let q = [t.cos(), t.sin()];
        let ks = cross_kernel(&self.train, &q, &self.kernel)?;
        Ok((self.gp.variance_from_kstar(&ks, 1.0)?, self.gh.error(&ks, 1.0)?))
    }

    pub fn sweep(&self, angles: &[f64], exec: Execution) -> Result<Vec<(f64, f64)>, Error> {
        exec.map_range(angles.len(), |i| self.at_angle(angles[i]))
            .into_iter()
            .collect()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Angles (radians) spanning the gap arc.
pub fn gap_angles(gap_deg: f64, count: usize) -> Vec<f64> {
    let h = gap_deg.to_radians() / 2.0;
    linspace(PI - h, PI + h, count)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn run_circle_gap(params: &Params, _seed: u64, exec: Execution) -> Result<Outcome, RunError> {
    let s = CircleGapSettings::from_params(params);
    let est = GapEstimators::fit(&s, exec)?;
    let half = s.gap_deg / 2.0;

    let full = linspace(0.0, 2.0 * PI, params.usize("queries"));
    let vals = est.sweep(&full, exec)?;
    let mut circle = Table::new(&["angle_deg", "in_gap", "gp_variance", "gh_error"]);
    for (t, (gp, gh)) in full.iter().zip(&vals) {
        let deg = t.to_degrees();
        circle.push(vec![deg.into(), ((deg - 180.0).abs() <= half).into(), (*gp).into(), (*gh).into()]);
    }

    let arc = gap_angles(s.gap_deg, params.usize("gap_queries"));
    let arc_vals = est.sweep(&arc, exec)?;
    let mut gap = Table::new(&["angle_deg", "gp_variance", "gh_error", "abs_difference"]);
    let mut max_diff: f64 = 0.0;
    for (t, (gp, gh)) in arc.iter().zip(&arc_vals) {
        max_diff = max_diff.max((gp - gh).abs());
        gap.push(vec![t.to_degrees().into(), (*gp).into(), (*gh).into(), (gp - gh).abs().into()]);
    }
    let gps: Vec<f64> = arc_vals.iter().map(|v| v.0).collect();
    let ghs: Vec<f64> = arc_vals.iter().map(|v| v.1).collect();

    let mut widths = Table::new(&["gap_deg", "center_gp_variance", "center_gh_error"]);
    let mut centres = Vec::new();
    for &w in params.floats("widths") {
        let e = GapEstimators::fit(&CircleGapSettings { gap_deg: w, ..s }, exec)?;
        let (gp, gh) = e.at_angle(PI)?;
        centres.push((gp, gh));
        widths.push(vec![w.into(), gp.into(), gh.into()]);
    }
    let increasing = centres.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1);

    let mut d = derived();
    d.insert("epsilon".into(), json!(s.epsilon));
    d.insert("effective_noise".into(), json!(est.gp.effective_noise()));
    d.insert("retained".into(), json!(est.gh.retained().len()));
    d.insert("max_abs_difference_over_gap".into(), json!(max_diff));
    d.insert("argmax_gp_deg".into(), json!(arc[argmax(&gps)].to_degrees()));
    d.insert("argmax_gh_deg".into(), json!(arc[argmax(&ghs)].to_degrees()));
    d.insert("center_error_increasing".into(), json!(increasing));
    Ok(Outcome {
        tables: vec![("circle_gap.csv", circle), ("gap_arc.csv", gap), ("gap_widths.csv", widths)],
        derived: d,
    })
}

// ---------------------------------------------------------- latent-agreement

static LATENT_PARAMS: &[ParamSpec] = &[
    p("n", Kind::UInt, "120", "training points on the circle"),
    p("gap_deg", Kind::Float, "60", "width of the missing arc centred on 180 degrees"),
    p("epsilon", Kind::Float, "0.1", "kernel bandwidth"),
    p("noise_variance", Kind::Float, "0", "GP noise variance"),
    p("jitter", Kind::Float, "1e-10", "diagonal jitter used when noise_variance = 0"),
    p("queries", Kind::UInt, "721", "query angles over the full circle"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub angle: f64,
    pub arclength: f64,
    pub estimate_2d: f64,
    pub estimate_1d: f64,
    pub estimate_euclidean: f64,
}

#[derive(Debug, Clone)]
pub struct LatentResult {
    pub rows: Vec<LatentRow>,
    pub kernels_bit_equal: bool,
}

/// Arclength along the gapped circle, measured counter-clockwise from the
/// end of the gap.
fn arclength(p: &[f64], start: f64) -> f64 {
    (p[1].atan2(p[0]) - start).rem_euclid(2.0 * PI)
}

pub fn latent_agreement(
    n: usize,
    gap_deg: f64,
    epsilon: f64,
    noise_variance: f64,
    jitter: f64,
    query_angles: &[f64],
) -> Result<LatentResult, Error> {
    let (ps, _) = circle_gap(n, gap_deg)?;
    let start = PI + gap_deg.to_radians() / 2.0;
    let s: Vec<f64> = ps.iter().map(|p| arclength(p, start)).collect();

    // Plane: geodesic distance along the circle, computed from the 2-D points.
    let geo = |a: &[f64], b: &[f64]| (arclength(a, start) - arclength(b, start)).abs();
    let d2 = DistanceMatrix::from_fn(n, |i, j| geo(ps.point(i), ps.point(j)))?;
    // Line: ordinary Euclidean distance between the arclength coordinates.
    let line = PointSet::from_scalars(&s)?;
    let d1 = DistanceMatrix::from_fn(n, |i, j| squared_distance(line.point(i), line.point(j)).sqrt())?;

    let spec = KernelSpec::precomputed(epsilon)?;
    let k2 = kernel_matrix(&d2, &spec)?;
    let k1 = kernel_matrix(&d1, &spec)?;
    let kernels_bit_equal = k2.iter().zip(k1.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let zeros = DVector::zeros(n);
    let gp2 = GpPosterior::from_kernel(&k2, &zeros, noise_variance, jitter)?;
    let gp1 = GpPosterior::from_kernel(&k1, &zeros, noise_variance, jitter)?;
    let euclid = fit_gp(
        &ps,
        &zeros,
        &GpSpec::new(KernelSpec::new(epsilon)?, noise_variance).with_jitter(jitter),
    )?;

    let mut rows = Vec::with_capacity(query_angles.len());
    for &t in query_angles {
        let q = [t.cos(), t.sin()];
        let sq = arclength(&q, start);
        let row2: Vec<f64> = ps.iter().map(|p| geo(&q, p)).collect();
        let row1: Vec<f64> = line.iter().map(|p| squared_distance(&[sq], p).sqrt()).collect();
        rows.push(LatentRow {
            angle: t,
            arclength: sq,
            estimate_2d: gp2.variance_from_kstar(&cross_kernel_from_distances(&row2, &spec)?, 1.0)?,
            estimate_1d: gp1.variance_from_kstar(&cross_kernel_from_distances(&row1, &spec)?, 1.0)?,
            estimate_euclidean: euclid.variance(&q)?,
        });
    }
    Ok(LatentResult {
        rows,
        kernels_bit_equal,
    })
}

fn run_latent(params: &Params, _seed: u64, _exec: Execution) -> Result<Outcome, RunError> {
    let angles = linspace(0.0, 2.0 * PI, params.usize("queries"));
    let res = latent_agreement(
        params.usize("n"),
        params.float("gap_deg"),
        params.float("epsilon"),
        params.float("noise_variance"),
        params.float("jitter"),
        &angles,
    )?;
    let mut t = Table::new(&[
        "angle_deg",
        "arclength",
        "estimate_2d",
        "estimate_1d",
        "estimate_euclidean",
        "abs_difference",
    ]);
    let mut max_diff: f64 = 0.0;
    for r in &res.rows {
        let diff = (r.estimate_2d - r.estimate_1d).abs();
        max_diff = max_diff.max(diff);
        t.push(vec![
            r.angle.to_degrees().into(),
            r.arclength.into(),
            r.estimate_2d.into(),
            r.estimate_1d.into(),
            r.estimate_euclidean.into(),
            diff.into(),
        ]);
    }
    let mut d = derived();
    d.insert("epsilon".into(), json!(params.float("epsilon")));
    d.insert("max_abs_difference".into(), json!(max_diff));
    d.insert("kernels_bit_equal".into(), json!(res.kernels_bit_equal));
    Ok(Outcome {
        tables: vec![("latent_agreement.csv", t)],
        derived: d,
    })
}

// ------------------------------------------------------------ inductive-bias

static BIAS_PARAMS: &[ParamSpec] = &[
    p("m", Kind::UInt, "20", "points per segment on [-2,-1] and [1,2]"),
    p("epsilon", Kind::Float, "0.1", "kernel bandwidth"),
    p("simple_freq", Kind::Float, "0.25", "simple target sin(pi * freq * x)"),
    p("complicated_freq", Kind::Float, "6", "complicated target sin(pi * freq * x)"),
    p("noise_min", Kind::Float, "1e-12", "smallest noise variance on the search grid"),
    p("noise_max", Kind::Float, "100", "largest noise variance on the search grid"),
    p("per_decade", Kind::UInt, "4", "noise grid points per decade"),
    p("gap_queries", Kind::UInt, "99", "interior query points in (-1, 1)"),
];

#[derive(Debug, Clone, Copy)]
pub struct BiasSettings {
    pub m: usize,
    pub epsilon: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub per_decade: usize,
    pub gap_queries: usize,
}

impl Default for BiasSettings {
    fn default() -> Self {
        Self {
            m: 20,
            epsilon: 0.1,
            noise_min: 1e-12,
            noise_max: 100.0,
            per_decade: 4,
            gap_queries: 99,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiasFit {
    pub noise_variance: f64,
    pub signal_variance: f64,
    pub log_evidence: f64,
    pub scores: Vec<(f64, f64)>,
    /// `(x, truth, mean, |mean − truth|, estimated σ)` over the gap.
    pub rows: Vec<[f64; 5]>,
    pub mean_true_error: f64,
    pub mean_sigma: f64,
}

/// Fits a GP whose noise variance maximizes the amplitude-profiled evidence
/// and reports the true error and the estimated standard deviation
/// `√(a Σ*)` across the gap.
pub fn inductive_bias<F: Fn(f64) -> f64>(s: &BiasSettings, target: F, exec: Execution) -> Result<BiasFit, Error> {
    let (xs, ys) = two_segment(s.m, &target)?;
    let train = PointSet::from_scalars(&xs)?;
    let kernel = KernelSpec::new(s.epsilon)?;
    let k = kernel_matrix_from_points_with(&train, &kernel, exec)?;
    let f = DVector::from_vec(ys);
    let grid = log_grid(s.noise_min, s.noise_max, s.per_decade)?;
    let sel = select_noise(&k, &f, &grid, Evidence::ProfiledAmplitude, exec)?;
    let post = GpPosterior::from_kernel(&k, &f, sel.noise_variance, DEFAULT_JITTER)?;
    let a = post.profiled_signal_variance();
    let qs: Vec<f64> = (1..=s.gap_queries)
        .map(|i| -1.0 + 2.0 * i as f64 / (s.gap_queries + 1) as f64)
        .collect();
    let mut rows = Vec::with_capacity(qs.len());
    for &x in &qs {
        let ks = cross_kernel(&train, &[x], &kernel)?;
        let mean = post.mean_from_kstar(&ks)?;
        let var = post.variance_from_kstar(&ks, 1.0)?;
        let truth = target(x);
        rows.push([x, truth, mean, (mean - truth).abs(), (a * var.max(0.0)).sqrt()]);
    }
    let n = rows.len() as f64;
    Ok(BiasFit {
        noise_variance: sel.noise_variance,
        signal_variance: a,
        log_evidence: sel.log_evidence,
        scores: sel.scores,
        mean_true_error: rows.iter().map(|r| r[3]).sum::<f64>() / n,
        mean_sigma: rows.iter().map(|r| r[4]).sum::<f64>() / n,
        rows,
    })
}

fn run_bias(params: &Params, _seed: u64, exec: Execution) -> Result<Outcome, RunError> {
    let s = BiasSettings {
        m: params.usize("m"),
        epsilon: params.float("epsilon"),
        noise_min: params.float("noise_min"),
        noise_max: params.float("noise_max"),
        per_decade: params.usize("per_decade"),
        gap_queries: params.usize("gap_queries"),
    };
    let fits = [
        ("simple", inductive_bias(&s, sine(params.float("simple_freq")), exec)?),
        ("complicated", inductive_bias(&s, sine(params.float("complicated_freq")), exec)?),
    ];
    let mut curve = Table::new(&["function", "x", "truth", "mean", "true_error", "estimated_sigma"]);
    let mut grid = Table::new(&["function", "noise_variance", "log_evidence"]);
    let mut tuned = Table::new(&[
        "function",
        "noise_variance",
        "signal_variance",
        "log_evidence",
        "mean_true_error",
        "mean_estimated_sigma",
    ]);
    for (name, fit) in &fits {
        for r in &fit.rows {
            curve.push(vec![(*name).into(), r[0].into(), r[1].into(), r[2].into(), r[3].into(), r[4].into()]);
        }
        for (nv, le) in &fit.scores {
            grid.push(vec![(*name).into(), (*nv).into(), (*le).into()]);
        }
        tuned.push(vec![
            (*name).into(),
            fit.noise_variance.into(),
            fit.signal_variance.into(),
            fit.log_evidence.into(),
            fit.mean_true_error.into(),
            fit.mean_sigma.into(),
        ]);
    }
    let (simple, comp) = (&fits[0].1, &fits[1].1);
    let mut d = derived();
    d.insert("epsilon".into(), json!(s.epsilon));
    d.insert("noise_variance_simple".into(), json!(simple.noise_variance));
    d.insert("noise_variance_complicated".into(), json!(comp.noise_variance));
    d.insert(
        "reversal".into(),
        json!(comp.mean_true_error > simple.mean_true_error && comp.mean_sigma < simple.mean_sigma),
    );
    Ok(Outcome {
        tables: vec![
            ("inductive_bias.csv", curve),
            ("noise_selection.csv", grid),
            ("tuned.csv", tuned),
        ],
        derived: d,
    })
}

// ------------------------------------------------------------------- filters

static FILTER_PARAMS: &[ParamSpec] = &[
    p("n", Kind::UInt, "20", "equally spaced points on the full circle"),
    p("epsilon", Kind::Float, "0.1", "kernel bandwidth"),
    p("alpha", Kind::Float, "0.05", "filter threshold for the eigenvalue table"),
    p("n_factor", Kind::UInt, "20", "ridge shift multiplier n in 1/(sigma + n alpha^2)"),
    p(
        "convergence_alphas",
        Kind::FloatList,
        "1e-1,1e-2,1e-3,1e-4,1e-5,1e-6",
        "alphas for the truncate-vs-ridge solve comparison",
    ),
    p("sweep_min", Kind::Float, "1e-8", "smallest eigenvalue in the synthetic sweep"),
    p("sweep_max", Kind::Float, "10", "largest eigenvalue in the synthetic sweep"),
    p("sweep_per_decade", Kind::UInt, "10", "sweep points per decade"),
];

/// Full-circle system used by the filter experiment: eigensystem and the
/// right-hand side `sin t + cos(2t)/2 + cos(7t)/10`.
pub fn filter_system(n: usize, epsilon: f64) -> Result<(gpgh::spectral::EigenSystem, DVector<f64>), Error> {
    let (ps, angles) = circle_gap(n, 0.0)?;
    let k = kernel_matrix_from_points_with(&ps, &KernelSpec::new(epsilon)?, Execution::Sequential)?;
    let es = eig_sym_psd(&k, 0.0)?;
    let b = DVector::from_iterator(
        n,
        angles.iter().map(|t| t.sin() + 0.5 * (2.0 * t).cos() + 0.1 * (7.0 * t).cos()),
    );
    Ok((es, b))
}

/// `‖x_truncate − x_ridge‖ / ‖x_truncate‖` at threshold `alpha`.
pub fn truncate_ridge_gap(
    es: &gpgh::spectral::EigenSystem,
    b: &DVector<f64>,
    alpha: f64,
    n_factor: u32,
) -> Result<f64, Error> {
    let xt = regularized_solve(es, b, &RegularizationSpec::Truncate { threshold: alpha })?;
    let xr = regularized_solve(es, b, &RegularizationSpec::Ridge { alpha, n_factor })?;
    Ok((&xt - &xr).norm() / xt.norm())
}

fn run_filters(params: &Params, _seed: u64, _exec: Execution) -> Result<Outcome, RunError> {
    let n_factor = u32_param(params, "n_factor")?;
    let alpha = params.float("alpha");
    let (es, b) = filter_system(params.usize("n"), params.float("epsilon"))?;
    let rows = filter_table(&es, alpha, n_factor)?;
    let mut table = Table::new(&[
        "index",
        "sigma",
        "w_gh",
        "w_gpr",
        "w_tikhonov",
        "factor_gh",
        "factor_gpr",
        "factor_tikhonov",
    ]);
    for (i, r) in rows.iter().enumerate() {
        let (a, g, tk) = r.factors();
        table.push(vec![
            i.into(),
            r.sigma.into(),
            r.w_gh.into(),
            r.w_gpr.into(),
            r.w_tikhonov.into(),
            a.into(),
            g.into(),
            tk.into(),
        ]);
    }

    let sweep_sigmas = log_grid(params.float("sweep_min"), params.float("sweep_max"), params.usize("sweep_per_decade"))?;
    let gh = RegularizationSpec::Truncate { threshold: alpha };
    let gpr = RegularizationSpec::Ridge { alpha, n_factor };
    let tk = RegularizationSpec::Tikhonov { alpha };
    let mut sweep = Table::new(&["sigma", "factor_gh", "factor_gpr", "factor_tikhonov"]);
    for s in sweep_sigmas {
        sweep.push(vec![
            s.into(),
            (s * gh.weight(s)).into(),
            (s * gpr.weight(s)).into(),
            (s * tk.weight(s)).into(),
        ]);
    }

    let mut conv = Table::new(&["alpha", "relative_gap"]);
    let mut gaps = Vec::new();
    for &a in params.floats("convergence_alphas") {
        let g = truncate_ridge_gap(&es, &b, a, n_factor)?;
        gaps.push(json!([a, g]));
        conv.push(vec![a.into(), g.into()]);
    }

    let below = rows.iter().filter(|r| r.sigma < alpha).count();
    let mut d = derived();
    d.insert("epsilon".into(), json!(params.float("epsilon")));
    d.insert("smallest_eigenvalue".into(), json!(es.value(es.len() - 1)));
    d.insert("eigenvalues_below_alpha".into(), json!(below));
    d.insert("retained".into(), json!(es.len() - below));
    d.insert("convergence".into(), Json::Array(gaps));
    Ok(Outcome {
        tables: vec![
            ("filter_table.csv", table),
            ("filter_sweep.csv", sweep),
            ("convergence.csv", conv),
        ],
        derived: d,
    })
}

// ---------------------------------------------------------------- bo-reduced

static BO_PARAMS: &[ParamSpec] = &[
    p("n0", Kind::UInt, "50", "initial Metropolis-Hastings samples"),
    p("n_max", Kind::UInt, "80", "total evaluation budget, seeds included"),
    p("x0_1", Kind::Float, "1", "chain start, first coordinate"),
    p("x0_2", Kind::Float, "0", "chain start, second coordinate"),
    p("k1", Kind::Float, "10", "angular stiffness of the canyon"),
    p("k2", Kind::Float, "50", "radial stiffness of the canyon"),
    p("kappa", Kind::Float, "1.96", "exploration weight"),
    p("tau", Kind::Float, "3", "distance-penalty weight"),
    p("beta", Kind::Float, "2", "inverse temperature of the seeding chain"),
    p("mh_step", Kind::Float, "0.15", "proposal standard deviation"),
    p("burn_in", Kind::UInt, "100", "discarded chain steps"),
    p("relax_steps", Kind::UInt, "200", "gradient steps per relaxation"),
    p("learning_rate", Kind::Float, "1e-3", "gradient step size"),
    p("refit_every", Kind::UInt, "1", "iterations between diffusion-map refits"),
    p("grid_size", Kind::UInt, "401", "acquisition grid nodes per dimension"),
    p("embed_epsilon", Kind::FloatOrAuto, "auto", "diffusion-map bandwidth"),
    p("surrogate_epsilon", Kind::FloatOrAuto, "auto", "surrogate and lift bandwidth"),
    p("surrogate_noise", Kind::Float, "1e-8", "surrogate GP noise variance"),
    p("lift_noise", Kind::Float, "0", "lift GP noise variance"),
    p("jitter", Kind::Float, "1e-10", "diagonal jitter used when a noise variance is 0"),
    p("relax_new_points", Kind::Bool, "true", "relax lifted points before evaluation"),
];

pub fn bo_config(params: &Params, seed: u64, exec: Execution) -> BoConfig {
    BoConfig {
        n0: params.usize("n0"),
        n_max: params.usize("n_max"),
        x0: [params.float("x0_1"), params.float("x0_2")],
        acquisition: AcquisitionParams {
            kappa: params.float("kappa"),
            tau: params.float("tau"),
        },
        mh: MhParams {
            beta: params.float("beta"),
            step: params.float("mh_step"),
            burn_in: params.usize("burn_in"),
        },
        relax: RelaxParams {
            steps: params.usize("relax_steps"),
            learning_rate: params.float("learning_rate"),
        },
        embed_dim: 1,
        refit_every: params.usize("refit_every"),
        grid_size: params.usize("grid_size"),
        embed_epsilon: params.float_or_auto("embed_epsilon"),
        surrogate_epsilon: params.float_or_auto("surrogate_epsilon"),
        surrogate_noise: params.float("surrogate_noise"),
        lift_noise: params.float("lift_noise"),
        jitter: params.float("jitter"),
        relax_new_points: params.bool("relax_new_points"),
        seed,
        exec,
    }
}

fn bo_outcome(state: &BoState, cfg: &BoConfig) -> Outcome {
    let mut trace = Table::new(&[
        "iteration",
        "y_star_1",
        "y_star_2",
        "acquisition",
        "lifted_x1",
        "lifted_x2",
        "lift_sigma_x1",
        "lift_sigma_x2",
        "x1",
        "x2",
        "f",
        "incumbent_f",
        "incumbent_x1",
        "incumbent_x2",
        "spearman",
        "grid_evaluations",
        "m0",
        "embed_epsilon",
        "surrogate_epsilon",
    ]);
    let opt = |v: f64| if v.is_nan() { Cell::Empty } else { Cell::F(v) };
    for r in &state.trace {
        trace.push(vec![
            r.iteration.into(),
            r.y_star[0].into(),
            r.y_star.get(1).copied().into(),
            r.acquisition.into(),
            r.lifted[0].into(),
            r.lifted[1].into(),
            r.lift_sigma[0].into(),
            r.lift_sigma[1].into(),
            r.x[0].into(),
            r.x[1].into(),
            r.f.into(),
            r.incumbent_f.into(),
            r.incumbent_x[0].into(),
            r.incumbent_x[1].into(),
            r.spearman.into(),
            r.grid_evaluations.into(),
            r.m0.into(),
            opt(r.embed_epsilon),
            r.surrogate_epsilon.into(),
        ]);
    }
    let mut points = Table::new(&["index", "phase", "x1", "x2", "theta", "f"]);
    for (i, (x, f)) in state.x.iter().zip(&state.f_vals).enumerate() {
        let phase = if i < cfg.n0 { "seed" } else { "bo" };
        points.push(vec![i.into(), phase.into(), x[0].into(), x[1].into(), x[1].atan2(x[0]).into(), (*f).into()]);
    }
    let first_below = state
        .trace
        .iter()
        .find(|r| r.incumbent_f <= 5e-2)
        .map(|r| r.iteration);
    let seed_best = state.f_vals[..cfg.n0].iter().copied().fold(f64::INFINITY, f64::min);
    let min_rho = state
        .trace
        .iter()
        .filter_map(|r| r.spearman.map(f64::abs))
        .fold(None::<f64>, |a, r| Some(a.map_or(r, |a| a.min(r))));
    let [h1, h2] = CanyonObjective::minimizer();
    let (ix, ifv) = state.incumbent;
    let mut d = derived();
    d.insert("iterations_completed".into(), json!(state.trace.len()));
    d.insert("aborted".into(), json!(state.aborted.as_ref().map(|e| e.to_string())));
    d.insert("mh_acceptance".into(), json!(state.mh_acceptance));
    d.insert("stuck_seeds".into(), json!(state.stuck_seeds));
    d.insert("best_seed_f".into(), json!(seed_best));
    d.insert("incumbent_f".into(), json!(ifv));
    d.insert("incumbent_x".into(), json!(ix));
    d.insert(
        "incumbent_distance_to_minimizer".into(),
        json!(((ix[0] - h1).powi(2) + (ix[1] - h2).powi(2)).sqrt()),
    );
    d.insert("first_iteration_at_or_below_0.05".into(), json!(first_below));
    d.insert("min_abs_spearman".into(), json!(min_rho));
    d.insert("m0_last".into(), json!(state.trace.last().map(|r| r.m0)));
    d.insert(
        "embed_epsilon_last".into(),
        json!(state.trace.last().map(|r| r.embed_epsilon).filter(|v| !v.is_nan())),
    );
    d.insert("grid_evaluations_per_iteration".into(), json!(state.trace.first().map(|r| r.grid_evaluations)));
    Outcome {
        tables: vec![("trace.csv", trace), ("points.csv", points)],
        derived: d,
    }
}

fn canyon(params: &Params) -> Result<CanyonObjective, RunError> {
    Ok(CanyonObjective::new(params.float("k1"), params.float("k2"))?)
}

fn run_bo_reduced(params: &Params, seed: u64, exec: Execution) -> Result<Outcome, RunError> {
    let cfg = bo_config(params, seed, exec);
    let state = run_reduced_bo(&canyon(params)?, &cfg)?;
    Ok(bo_outcome(&state, &cfg))
}

fn run_bo_plain(params: &Params, seed: u64, exec: Execution) -> Result<Outcome, RunError> {
    let cfg = bo_config(params, seed, exec);
    let state = run_plain_bo(&canyon(params)?, &cfg)?;
    Ok(bo_outcome(&state, &cfg))
}

// ----------------------------------------------------------------- kl-sample

static KL_PARAMS: &[ParamSpec] = &[
    p("n", Kind::UInt, "60", "equally spaced points on the full circle"),
    p("epsilon", Kind::Float, "0.5", "kernel bandwidth"),
    p("rank", Kind::UInt, "1", "number of KL terms"),
    p("samples", Kind::UInt, "10000", "number of realizations"),
    p("emit_samples", Kind::UInt, "20", "realizations written to samples.csv"),
];

#[derive(Debug, Clone)]
pub struct KlDiagnostics {
    pub samples: DMatrix<f64>,
    pub empirical: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub frobenius_relative_error: f64,
    pub max_abs_mean: f64,
    pub mean_bound: f64,
    pub mercer_error: f64,
}

pub fn kl_diagnostics(n: usize, epsilon: f64, rank: usize, samples: usize, seed: u64) -> Result<KlDiagnostics, Error> {
    let (ps, _) = circle_gap(n, 0.0)?;
    let k = kernel_matrix_from_points_with(&ps, &KernelSpec::new(epsilon)?, Execution::Sequential)?;
    let es = eig_sym_psd(&k, 1e-12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_kl(&es, rank, &mut rng, samples)?;
    let m = samples as f64;
    let empirical = &s * s.transpose() / m;
    let mut target = DMatrix::zeros(n, n);
    for j in 0..rank {
        let v = es.vector(j);
        target += v * v.transpose() * es.value(j);
    }
    let max_abs_mean = (0..n).map(|i| s.row(i).mean().abs()).fold(0.0, f64::max);
    Ok(KlDiagnostics {
        frobenius_relative_error: (&empirical - &target).norm() / target.norm(),
        max_abs_mean,
        mean_bound: 4.0 * (es.largest() / m).sqrt(),
        mercer_error: (es.reconstruct() - &k).amax(),
        samples: s,
        empirical,
        target,
    })
}

fn run_kl(params: &Params, seed: u64, _exec: Execution) -> Result<Outcome, RunError> {
    let n = params.usize("n");
    let diag = kl_diagnostics(n, params.float("epsilon"), params.usize("rank"), params.usize("samples"), seed)?;
    let (_, angles) = circle_gap(n, 0.0)?;
    let emit = params.usize("emit_samples").min(diag.samples.ncols());
    let mut samples = Table::new(&["sample", "index", "angle", "value"]);
    for s in 0..emit {
        for (i, angle) in angles.iter().enumerate() {
            samples.push(vec![s.into(), i.into(), (*angle).into(), diag.samples[(i, s)].into()]);
        }
    }
    let mut cov = Table::new(&["i", "j", "empirical", "target"]);
    for i in 0..n {
        for j in 0..n {
            cov.push(vec![i.into(), j.into(), diag.empirical[(i, j)].into(), diag.target[(i, j)].into()]);
        }
    }
    let mut d = derived();
    d.insert("frobenius_relative_error".into(), json!(diag.frobenius_relative_error));
    d.insert("max_abs_mean".into(), json!(diag.max_abs_mean));
    d.insert("mean_bound".into(), json!(diag.mean_bound));
    d.insert("mercer_reconstruction_error".into(), json!(diag.mercer_error));
    Ok(Outcome {
        tables: vec![("samples.csv", samples), ("covariance.csv", cov)],
        derived: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Params;

    fn defaults(name: &str) -> Params {
        let def = find(name).unwrap();
        Params::resolve(name, def.params, None, &[], &schema).unwrap()
    }

    #[test]
    fn every_default_parses() {
        for e in EXPERIMENTS {
            defaults(e.name);
        }
    }

    #[test]
    fn bo_defaults_match_library() {
        let cfg = bo_config(&defaults("bo-reduced"), 0, Execution::default());
        assert_eq!(cfg, BoConfig::default());
    }

    #[test]
    fn filter_system_is_full_rank() {
        let (es, _) = filter_system(20, 0.1).unwrap();
        assert!(es.value(19) > 1e-2);
    }
}
