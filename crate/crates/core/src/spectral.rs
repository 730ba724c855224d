//! Dense symmetric PSD eigendecomposition and the two regularized inverses
//! built on it, viewed as spectral filters on `1/σ_i`:
//!
//! * truncation (geometric harmonics): `w_i = 1/σ_i` for `σ_i ≥ α`, else 0;
//! * ridge (GP regression): `w_i = 1/(σ_i + n α²)`, i.e. `(A + nα²I)⁻¹`.
//!
//! Truncation keeps the *large* eigenvalues, the usual pseudo-inverse
//! convention, so that it agrees with the retained set
//! `S_δ = { j : σ_j > δ σ_0 }` used by [`crate::gh`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default eigenvalue clamp, relative to the largest eigenvalue.
pub const DEFAULT_CLAMP_TOL: f64 = 1e-12;

/// Eigenvalues `σ_1 ≥ σ_2 ≥ … ≥ 0` and orthonormal eigenvectors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl EigenSystem {
    /// Assembles an eigensystem from parts, sorting into descending order.
    /// Eigenvalues must already be nonnegative.
    pub fn from_parts(values: DVector<f64>, vectors: DMatrix<f64>) -> Result<Self> {
        let n = values.len();
        if vectors.nrows() != vectors.ncols() || vectors.ncols() != n {
            return Err(Error::Input(format!(
                "{} eigenvalues for a {}x{} eigenvector matrix",
                n,
                vectors.nrows(),
                vectors.ncols()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input("eigenvalues must be nonnegative and finite".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let values = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
        let vectors = DMatrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
        Ok(Self { values, vectors })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn vector(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.vectors.column(i)
    }

    pub fn largest(&self) -> f64 {
        self.values.get(0).copied().unwrap_or(0.0)
    }

    /// Number of strictly positive eigenvalues.
    pub fn positive_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Coefficients `Vᵀ b`.
    pub fn project(&self, b: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(b)
    }

    /// `V Σ Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.len(), self.len(), |r, c| {
            self.vectors[(r, c)] * self.values[c]
        });
        scaled * self.vectors.transpose()
    }

    /// `‖VᵀV − I‖_max`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.vectors.tr_mul(&self.vectors);
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Returns the system with every eigenvector negated (the same
    /// decomposition up to sign).
    pub fn negated(&self) -> Self {
        Self {
            values: self.values.clone(),
            vectors: -&self.vectors,
        }
    }
}

/// Eigendecomposition of a symmetric positive semi-definite matrix.
///
/// `clamp_tol` is relative to the largest eigenvalue `σ_1`: eigenvalues with
/// `|σ_i| ≤ clamp_tol·σ_1` are treated as numerical zeros and set to 0, while
/// anything below `-clamp_tol·σ_1` is reported as [`Error::NotPsd`].
pub fn eig_sym_psd(a: &DMatrix<f64>, clamp_tol: f64) -> Result<EigenSystem> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Input("eigendecomposition needs a non-empty square matrix".into()));
    }
    if !(clamp_tol >= 0.0 && clamp_tol.is_finite()) {
        return Err(Error::Parameter(format!("invalid clamp tolerance {clamp_tol}")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let scale = a.amax();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Input(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let tol = clamp_tol * top;
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < -tol {
            return Err(Error::NotPsd {
                eigenvalue: *v,
                tolerance: tol,
            });
        }
        if v.abs() <= tol {
            *v = 0.0;
        }
    }
    let es = EigenSystem::from_parts(values, eig.eigenvectors)?;
    debug_assert!(
        es.orthonormality_defect() <= 1e-10,
        "eigenvectors lost orthonormality: {:e}",
        es.orthonormality_defect()
    );
    Ok(es)
}

/// Choice of spectral filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizationSpec {
    /// Truncated pseudo-inverse: keep `1/σ_i` for `σ_i ≥ threshold`.
    Truncate { threshold: f64 },
    /// Ridge: `1/(σ_i + n_factor·α²)`.
    Ridge { alpha: f64, n_factor: u32 },
    /// Diagnostic filter factor `D_ii = σ_i²/(σ_i² + α²)`, weight `D_ii/σ_i`.
    /// Only available through [`filter_weights`] and [`filter_table`]; it is
    /// not the filter of the GP posterior and is refused by
    /// [`regularized_solve`].
    Tikhonov { alpha: f64 },
}

impl RegularizationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RegularizationSpec::Truncate { threshold } => threshold >= 0.0 && threshold.is_finite(),
            RegularizationSpec::Ridge { alpha, n_factor } => {
                alpha >= 0.0 && alpha.is_finite() && n_factor >= 1
            }
            RegularizationSpec::Tikhonov { alpha } => alpha >= 0.0 && alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid regularization {self:?}")))
        }
    }

    /// Weight applied to the eigenvalue `sigma`.  Zero eigenvalues always get
    /// weight 0 under truncation.
    pub fn weight(&self, sigma: f64) -> f64 {
        match *self {
            RegularizationSpec::Truncate { threshold } => {
                if sigma > 0.0 && sigma >= threshold {
                    1.0 / sigma
                } else {
                    0.0
                }
            }
            RegularizationSpec::Ridge { alpha, n_factor } => {
                let shift = f64::from(n_factor) * alpha * alpha;
                let denom = sigma + shift;
                if denom > 0.0 {
                    1.0 / denom
                } else {
                    0.0
                }
            }
            RegularizationSpec::Tikhonov { alpha } => {
                let denom = sigma * sigma + alpha * alpha;
                if sigma > 0.0 && denom > 0.0 {
                    sigma / denom
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn filter_weights(es: &EigenSystem, reg: &RegularizationSpec) -> Result<DVector<f64>> {
    reg.validate()?;
    Ok(es.values().map(|s| reg.weight(s)))
}

/// `y = V diag(w) Vᵀ b`.
pub fn regularized_solve(
    es: &EigenSystem,
    b: &DVector<f64>,
    reg: &RegularizationSpec,
) -> Result<DVector<f64>> {
    if matches!(reg, RegularizationSpec::Tikhonov { .. }) {
        return Err(Error::Parameter(
            "the D_ii diagnostic filter is not used for solves".into(),
        ));
    }
    if b.len() != es.len() {
        return Err(Error::Input(format!(
            "right-hand side of length {} for a system of size {}",
            b.len(),
            es.len()
        )));
    }
    let w = filter_weights(es, reg)?;
    let coeffs = es.project(b).component_mul(&w);
    Ok(es.vectors() * coeffs)
}

/// One row of the GH/GPR filter comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterRow {
    pub sigma: f64,
    pub w_gh: f64,
    pub w_gpr: f64,
    pub w_tikhonov: f64,
}

impl FilterRow {
    /// Filter factors `w·σ` (1 means the component passes through untouched).
    pub fn factors(&self) -> (f64, f64, f64) {
        (
            self.w_gh * self.sigma,
            self.w_gpr * self.sigma,
            self.w_tikhonov * self.sigma,
        )
    }
}

/// Weights of the truncated (`threshold = alpha`) and ridge filters for every
/// eigenvalue, in descending eigenvalue order.
pub fn filter_table(es: &EigenSystem, alpha: f64, n_factor: u32) -> Result<Vec<FilterRow>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("filter threshold must be positive, got {alpha}")));
    }
    let gh = RegularizationSpec::Truncate { threshold: alpha };
    let gpr = RegularizationSpec::Ridge { alpha, n_factor };
    let tk = RegularizationSpec::Tikhonov { alpha };
    gpr.validate()?;
    Ok(es
        .values()
        .iter()
        .map(|&sigma| FilterRow {
            sigma,
            w_gh: gh.weight(sigma),
            w_gpr: gpr.weight(sigma),
            w_tikhonov: tk.weight(sigma),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_matrix_from_points, KernelSpec, PointSet};
    use nalgebra::Cholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle_kernel(n: usize, eps: f64) -> DMatrix<f64> {
        let rows: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let ps = PointSet::from_rows(&rows).unwrap();
        kernel_matrix_from_points(&ps, &KernelSpec::new(eps).unwrap()).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_decomposition() {
        let a = DMatrix::<f64>::identity(4, 4);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        assert!(es.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!((es.reconstruct() - a).norm() < 1e-14);
    }

    #[test]
    fn two_by_two_by_hand() {
        // det([[2-s,1],[1,2-s]]) = (2-s)^2 - 1 -> s = 3, 1
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        assert!((es.value(0) - 3.0).abs() < 1e-14);
        assert!((es.value(1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn circle_kernel_reconstruction() {
        let a = circle_kernel(20, 0.5);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        assert!((es.reconstruct() - &a).norm() <= 1e-8 * a.norm());
        assert!(es.orthonormality_defect() <= 1e-10);
        for w in es.values().as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(eig_sym_psd(&asym, 1e-12), Err(Error::Input(_))));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(eig_sym_psd(&indef, 1e-12), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn tiny_negative_eigenvalues_clamped() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]) / 2f64.sqrt();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-14]));
        let a = &v * d * v.transpose();
        let es = eig_sym_psd(&a, 1e-12).unwrap();
        assert_eq!(es.value(1), 0.0);
    }

    #[test]
    fn filter_weight_examples() {
        let es = EigenSystem::from_parts(
            DVector::from_vec(vec![2.0, 1.0, 0.1]),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let w = filter_weights(&es, &RegularizationSpec::Truncate { threshold: 0.5 }).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 1.0, 0.0]);
        let one =
            EigenSystem::from_parts(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        let w = filter_weights(&one, &RegularizationSpec::Ridge { alpha: 1.0, n_factor: 1 }).unwrap();
        assert_eq!(w[0], 0.5);
    }

    #[test]
    fn zero_eigenvalue_never_divided() {
        let es = EigenSystem::from_parts(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let w = filter_weights(&es, &RegularizationSpec::Truncate { threshold: 0.0 }).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn weights_match_dense_inverse_on_eigenvectors() {
        let a = circle_kernel(20, 0.5);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        let (alpha, n) = (0.05, 2u32);
        let shifted = &a + DMatrix::identity(20, 20) * (f64::from(n) * alpha * alpha);
        let inv = shifted.clone().try_inverse().unwrap();
        let w = filter_weights(&es, &RegularizationSpec::Ridge { alpha, n_factor: n }).unwrap();
        for i in 0..20 {
            let v = es.vector(i).into_owned();
            let applied = &inv * &v;
            assert!((applied - &v * w[i]).norm() <= 1e-8 * w[i].max(1.0));
        }
        // truncation: V diag(w) V^T equals the inverse restricted to kept modes
        let thr = 1e-2;
        let wt = filter_weights(&es, &RegularizationSpec::Truncate { threshold: thr }).unwrap();
        let inv_a = a.clone().try_inverse().unwrap();
        for i in 0..20 {
            if es.value(i) >= thr {
                let v = es.vector(i).into_owned();
                assert!((&inv_a * &v - &v * wt[i]).norm() <= 1e-6 * wt[i]);
            } else {
                assert_eq!(wt[i], 0.0);
            }
        }
    }

    #[test]
    fn solve_trivial_cases() {
        let a = random_spd(5, 1);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        let zero = DVector::zeros(5);
        let reg = RegularizationSpec::Ridge { alpha: 0.3, n_factor: 1 };
        assert_eq!(regularized_solve(&es, &zero, &reg).unwrap().norm(), 0.0);
        let id = eig_sym_psd(&DMatrix::identity(5, 5), DEFAULT_CLAMP_TOL).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.0]);
        for reg in [
            RegularizationSpec::Truncate { threshold: 0.0 },
            RegularizationSpec::Ridge { alpha: 0.0, n_factor: 1 },
        ] {
            assert!((regularized_solve(&id, &b, &reg).unwrap() - &b).norm() < 1e-14);
        }
        assert!(regularized_solve(&id, &b, &RegularizationSpec::Tikhonov { alpha: 0.1 }).is_err());
        assert!(regularized_solve(&id, &DVector::zeros(3), &reg).is_err());
    }

    #[test]
    fn ridge_solve_matches_cholesky() {
        let a = random_spd(5, 9);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        let b = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0, 1.5]);
        let (alpha, n) = (0.2, 3u32);
        let y = regularized_solve(&es, &b, &RegularizationSpec::Ridge { alpha, n_factor: n }).unwrap();
        let m = &a + DMatrix::identity(5, 5) * (f64::from(n) * alpha * alpha);
        let direct = Cholesky::new(m).unwrap().solve(&b);
        assert!((&y - &direct).norm() <= 1e-8 * direct.norm());
    }

    #[test]
    fn truncate_zero_matches_inverse() {
        let a = random_spd(6, 4);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        let b = DVector::from_fn(6, |i, _| (i as f64).sin());
        let y = regularized_solve(&es, &b, &RegularizationSpec::Truncate { threshold: 0.0 }).unwrap();
        let direct = a.lu().solve(&b).unwrap();
        assert!((&y - &direct).norm() <= 1e-6 * direct.norm());
    }

    #[test]
    fn filter_table_conventions() {
        let alpha = 0.1;
        let es = EigenSystem::from_parts(
            DVector::from_vec(vec![5.0, 1.0, alpha, 0.05, 0.0]),
            DMatrix::identity(5, 5),
        )
        .unwrap();
        let rows = filter_table(&es, alpha, 2).unwrap();
        assert_eq!(rows.len(), 5);
        let at = rows[2];
        assert_eq!(at.w_gh, 1.0 / alpha);
        assert!((at.w_gpr - 1.0 / (alpha + 2.0 * alpha * alpha)).abs() < 1e-12);
        assert_eq!(rows[3].w_gh, 0.0);
        assert!(rows[3].w_gpr > 0.0);
        for r in &rows {
            let (fg, fr, fp) = r.factors();
            assert!((0.0..=1.0).contains(&fg));
            assert!((0.0..=1.0).contains(&fr));
            assert!((0.0..=1.0).contains(&fp));
            if r.sigma >= 100.0 * 2.0 * alpha * alpha && r.w_gh > 0.0 {
                assert!((r.w_gh - r.w_gpr).abs() / r.w_gh <= 0.01);
            }
        }
        assert!(filter_table(&es, 0.0, 1).is_err());
    }

    #[test]
    fn truncation_and_ridge_converge() {
        let a = random_spd(8, 21);
        let es = eig_sym_psd(&a, DEFAULT_CLAMP_TOL).unwrap();
        let b = DVector::from_fn(8, |i, _| 1.0 + i as f64);
        let gap = |alpha: f64| {
            let t = regularized_solve(&es, &b, &RegularizationSpec::Truncate { threshold: alpha }).unwrap();
            let r = regularized_solve(&es, &b, &RegularizationSpec::Ridge { alpha, n_factor: 1 }).unwrap();
            (t - &r).norm() / r.norm()
        };
        let (g4, g6) = (gap(1e-4), gap(1e-6));
        assert!(g6 < g4);
        assert!(g6 < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn filter_factors_are_contractions(sigma in 0.0f64..1e3, alpha in 0.0f64..10.0, n in 1u32..10) {
            for reg in [
                RegularizationSpec::Truncate { threshold: alpha },
                RegularizationSpec::Ridge { alpha, n_factor: n },
                RegularizationSpec::Tikhonov { alpha },
            ] {
                let f = reg.weight(sigma) * sigma;
                proptest::prop_assert!((0.0..=1.0 + 1e-15).contains(&f));
            }
        }
    }
}
