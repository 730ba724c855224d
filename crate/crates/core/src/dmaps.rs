//! α-normalized diffusion maps.
//!
//! Pipeline on a point cloud `x_1, …, x_N`:
//!
//! ```text
//! K_ij      = exp(-‖x_i − x_j‖² / 2ε)
//! Q_i       = Σ_j K_ij
//! K^(α)_ij  = K_ij / (Q_i^α Q_j^α)
//! d_i       = Σ_j K^(α)_ij
//! M_ij      = K^(α)_ij / √(d_i d_j)        (symmetric, conjugate to P = D⁻¹K^(α))
//! ψ_n       = φ_n / √d                      (right eigenvectors of P)
//! ```
//!
//! Embedding coordinates are `λ_j ψ_j` for `j = 1..=n_coords`; the trivial
//! pair `λ_0 = 1`, `ψ_0 ∝ 1` is dropped.  Each eigenvector is oriented so that
//! its entry of largest magnitude in `ψ` is positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kernels::{kernel_matrix_from_points_with, squared_distance, KernelSpec, PointSet};
use crate::spectral::{eig_sym_psd, EigenSystem, DEFAULT_CLAMP_TOL};

/// Smallest eigenvalue the Nyström extension is willing to divide by.
pub const LAMBDA_MIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    pub kernel: KernelSpec,
    /// Density normalization exponent in `[0, 1]`; 1 gives Laplace–Beltrami
    /// geometry independent of the sampling density.
    pub alpha: f64,
    pub n_coords: usize,
}

impl DiffusionSpec {
    pub fn new(kernel: KernelSpec, n_coords: usize) -> Self {
        Self {
            kernel,
            alpha: 1.0,
            n_coords,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn validate(&self, n_points: usize) -> Result<()> {
        self.kernel.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!(
                "normalization exponent must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.n_coords == 0 || self.n_coords >= n_points {
            return Err(Error::Parameter(format!(
                "need 1 <= n_coords < N, got n_coords = {} with N = {n_points}",
                self.n_coords
            )));
        }
        Ok(())
    }
}

/// A fitted diffusion map.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    train: PointSet,
    spec: DiffusionSpec,
    q: DVector<f64>,
    d_alpha: DVector<f64>,
    kalpha: DMatrix<f64>,
    markov_sym: DMatrix<f64>,
    eigen: EigenSystem,
    psi: DMatrix<f64>,
    coords: DMatrix<f64>,
}

/// Kernel quantities of a query point against the training set.
#[derive(Debug, Clone)]
pub struct OutOfSample {
    /// `K_ε(x*, x_i)`.
    pub k: DVector<f64>,
    /// `Q_ε(x*) = Σ_i K_ε(x*, x_i)`.
    pub q: f64,
    /// `K^(α)(x*, x_i)`.
    pub kalpha: DVector<f64>,
    /// `d^(α)(x*) = Σ_i K^(α)(x*, x_i)`.
    pub d: f64,
}

pub fn fit_dmaps(ps: &PointSet, spec: &DiffusionSpec) -> Result<DiffusionModel> {
    fit_dmaps_with(ps, spec, Execution::default())
}

pub fn fit_dmaps_with(ps: &PointSet, spec: &DiffusionSpec, exec: Execution) -> Result<DiffusionModel> {
    let n = ps.len();
    if n < 2 {
        return Err(Error::Input("diffusion maps need at least two points".into()));
    }
    spec.validate(n)?;
    let k = kernel_matrix_from_points_with(ps, &spec.kernel, exec)?;
    let q = DVector::from_iterator(n, k.row_iter().map(|r| r.sum()));
    for i in 0..n {
        // Q_i includes K_ii = 1, so isolation is Q_i == 1 exactly.
        if q[i] - k[(i, i)] <= 0.0 {
            return Err(Error::DegenerateKernel(format!(
                "point {i} has no neighbours at bandwidth {}; increase epsilon",
                spec.kernel.epsilon
            )));
        }
    }
    let qa = q.map(|v| v.powf(spec.alpha));
    let kalpha = DMatrix::from_fn(n, n, |i, j| k[(i, j)] / (qa[i] * qa[j]));
    let d_alpha = DVector::from_iterator(n, kalpha.row_iter().map(|r| r.sum()));
    let sd = d_alpha.map(f64::sqrt);
    let mut markov_sym = DMatrix::zeros(n, n);
    for i in 0..n {
        markov_sym[(i, i)] = kalpha[(i, i)] / d_alpha[i];
        for j in (i + 1)..n {
            let v = kalpha[(i, j)] / (sd[i] * sd[j]);
            markov_sym[(i, j)] = v;
            markov_sym[(j, i)] = v;
        }
    }
    let eigen = eig_sym_psd(&markov_sym, DEFAULT_CLAMP_TOL)?;
    DiffusionModel::assemble(ps.clone(), *spec, q, d_alpha, kalpha, markov_sym, eigen)
}

impl DiffusionModel {
    /// Builds the model from a decomposition of its symmetric Markov matrix,
    /// fixing eigenvector signs.
    fn assemble(
        train: PointSet,
        spec: DiffusionSpec,
        q: DVector<f64>,
        d_alpha: DVector<f64>,
        kalpha: DMatrix<f64>,
        markov_sym: DMatrix<f64>,
        eigen: EigenSystem,
    ) -> Result<Self> {
        let n = train.len();
        let sd = d_alpha.map(f64::sqrt);
        let mut phi = eigen.vectors().clone();
        let mut psi = DMatrix::from_fn(n, n, |i, c| phi[(i, c)] / sd[i]);
        for c in 0..n {
            let mut best = 0;
            for i in 1..n {
                if psi[(i, c)].abs() > psi[(best, c)].abs() {
                    best = i;
                }
            }
            if psi[(best, c)] < 0.0 {
                phi.column_mut(c).neg_mut();
                psi.column_mut(c).neg_mut();
            }
        }
        let eigen = EigenSystem::from_parts(eigen.values().clone(), phi)?;
        let lambdas = eigen.values();
        let coords = DMatrix::from_fn(n, spec.n_coords, |i, j| lambdas[j + 1] * psi[(i, j + 1)]);
        Ok(Self {
            train,
            spec,
            q,
            d_alpha,
            kalpha,
            markov_sym,
            eigen,
            psi,
            coords,
        })
    }

    pub fn train(&self) -> &PointSet {
        &self.train
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    /// Kernel density estimates `Q_ε(x_i)`.
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn d_alpha(&self) -> &DVector<f64> {
        &self.d_alpha
    }

    pub fn lambdas(&self) -> &DVector<f64> {
        self.eigen.values()
    }

    /// Orthonormal eigenvectors `φ_n` of the symmetric Markov matrix.
    pub fn phi(&self) -> &DMatrix<f64> {
        self.eigen.vectors()
    }

    /// Eigenvectors `ψ_n = φ_n / √d` of the transition matrix.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.eigen
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    /// The symmetric matrix `M^(α)`.
    pub fn markov_symmetric(&self) -> &DMatrix<f64> {
        &self.markov_sym
    }

    /// The row-stochastic transition matrix `P^(α) = D⁻¹ K^(α)`.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let n = self.train.len();
        DMatrix::from_fn(n, n, |i, j| self.kalpha[(i, j)] / self.d_alpha[i])
    }

    /// First `j_max` diffusion coordinates of the training points.
    pub fn embed(&self, j_max: usize) -> Result<DMatrix<f64>> {
        if j_max == 0 || j_max > self.spec.n_coords {
            return Err(Error::Parameter(format!(
                "requested {j_max} coordinates from a model with {}",
                self.spec.n_coords
            )));
        }
        Ok(self.coords.columns(0, j_max).into_owned())
    }

    pub fn out_of_sample(&self, query: &[f64]) -> Result<OutOfSample> {
        if query.len() != self.train.dim() {
            return Err(Error::Input(format!(
                "query dimension {} differs from training dimension {}",
                query.len(),
                self.train.dim()
            )));
        }
        let spec = &self.spec.kernel;
        let k = DVector::from_iterator(
            self.train.len(),
            self.train.iter().map(|p| spec.eval_sq(squared_distance(p, query))),
        );
        let q = k.sum();
        if q <= 0.0 {
            return Err(Error::DegenerateKernel(
                "query has no kernel mass on the training set".into(),
            ));
        }
        let a = self.spec.alpha;
        let qa = q.powf(a);
        let kalpha = DVector::from_fn(k.len(), |i, _| k[i] / (qa * self.q[i].powf(a)));
        let d = kalpha.sum();
        Ok(OutOfSample { k, q, kalpha, d })
    }

    /// Out-of-sample transition probabilities `p^(α)(x*, x_i)`.
    pub fn transition_row(&self, query: &[f64]) -> Result<DVector<f64>> {
        let oos = self.out_of_sample(query)?;
        Ok(oos.kalpha / oos.d)
    }

    /// Nyström extension `ψ_n(x*) = λ_n⁻¹ Σ_i p(x*, x_i) ψ_n(x_i)` for the
    /// given eigen-indices.
    pub fn extend_psi(&self, query: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        let p = self.transition_row(query)?;
        indices
            .iter()
            .map(|&n| {
                let lambda = self.lambdas()[n];
                if lambda <= LAMBDA_MIN_TOL {
                    return Err(Error::IllPosedExtension {
                        index: n,
                        eigenvalue: lambda,
                    });
                }
                Ok(p.dot(&self.psi.column(n)) / lambda)
            })
            .collect()
    }

    /// `ψ_j(x*)` for the nontrivial coordinates `j = 1..=n_coords`.
    pub fn nystrom_extend(&self, query: &[f64]) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (1..=self.spec.n_coords).collect();
        self.extend_psi(query, &idx)
    }

    /// Diffusion coordinates `λ_j ψ_j(x*)` of an out-of-sample point.
    pub fn embed_point(&self, query: &[f64]) -> Result<Vec<f64>> {
        let psi = self.nystrom_extend(query)?;
        Ok(psi
            .iter()
            .enumerate()
            .map(|(j, v)| self.lambdas()[j + 1] * v)
            .collect())
    }

    /// Out-of-sample values of the symmetric-kernel eigenvectors,
    /// `φ_n(x*) = √d(x*) ψ_n(x*)`, for `n = 0..count`.  These are the basis
    /// functions of the conditional KL expansion with covariance `M^(α)`.
    pub fn extend_phi(&self, query: &[f64], count: usize) -> Result<Vec<f64>> {
        let oos = self.out_of_sample(query)?;
        let sd = oos.d.sqrt();
        let idx: Vec<usize> = (0..count).collect();
        Ok(self
            .extend_psi(query, &idx)?
            .into_iter()
            .map(|v| sd * v)
            .collect())
    }

    /// Row `m(x*, x_i) = K^(α)(x*, x_i)/√(d(x*) d_i)` of the symmetric kernel
    /// and its diagonal value `m(x*, x*)`.
    pub fn symmetric_kernel_row(&self, query: &[f64]) -> Result<(DVector<f64>, f64)> {
        let oos = self.out_of_sample(query)?;
        let sd = oos.d.sqrt();
        let row = DVector::from_fn(oos.k.len(), |i, _| {
            oos.kalpha[i] / (sd * self.d_alpha[i].sqrt())
        });
        let self_term = 1.0 / (oos.q.powf(2.0 * self.spec.alpha) * oos.d);
        Ok((row, self_term))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::spearman;
    use std::f64::consts::PI;

    fn circle(n: usize, start: f64, span: f64) -> (PointSet, Vec<f64>) {
        let angles: Vec<f64> = (0..n).map(|i| start + span * i as f64 / n as f64).collect();
        let rows: Vec<[f64; 2]> = angles.iter().map(|t| [t.cos(), t.sin()]).collect();
        (PointSet::from_rows(&rows).unwrap(), angles)
    }

    #[test]
    fn two_point_closed_form() {
        let eps = 0.3;
        let ps = PointSet::from_rows(&[[0.0], [(2.0f64 * eps).sqrt()]]).unwrap();
        let spec = DiffusionSpec::new(KernelSpec::new(eps).unwrap(), 1).with_alpha(0.0);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let c = (-1.0f64).exp();
        assert!((m.lambdas()[0] - 1.0).abs() < 1e-12);
        assert!((m.lambdas()[1] - (1.0 - c) / (1.0 + c)).abs() < 1e-12);
        assert!((m.lambdas()[1] - 0.462_117_157_260_009_8).abs() < 1e-12);
    }

    #[test]
    fn identical_points_give_rank_one_markov_matrix() {
        let ps = PointSet::from_rows(&[[1.0, 2.0]; 5]).unwrap();
        let spec = DiffusionSpec::new(KernelSpec::new(1.0).unwrap(), 2);
        let m = fit_dmaps(&ps, &spec).unwrap();
        assert!((m.lambdas()[0] - 1.0).abs() < 1e-12);
        assert!(m.lambdas().iter().skip(1).all(|v| *v == 0.0));
        assert!(matches!(
            m.nystrom_extend(&[1.0, 2.0]),
            Err(Error::IllPosedExtension { index: 1, .. })
        ));
    }

    #[test]
    fn isolated_points_rejected() {
        let ps = PointSet::from_scalars(&[0.0, 1e3, 2e3]).unwrap();
        let spec = DiffusionSpec::new(KernelSpec::new(1e-3).unwrap(), 1);
        assert!(matches!(fit_dmaps(&ps, &spec), Err(Error::DegenerateKernel(_))));
    }

    #[test]
    fn spec_validation() {
        let ps = circle(10, 0.0, PI).0;
        let k = KernelSpec::new(0.1).unwrap();
        assert!(fit_dmaps(&ps, &DiffusionSpec::new(k, 0)).is_err());
        assert!(fit_dmaps(&ps, &DiffusionSpec::new(k, 10)).is_err());
        assert!(fit_dmaps(&ps, &DiffusionSpec::new(k, 2).with_alpha(1.5)).is_err());
    }

    #[test]
    fn markov_structure_and_conjugacy() {
        let (ps, _) = circle(40, 0.2, 2.5);
        let spec = DiffusionSpec::new(KernelSpec::new(0.05).unwrap(), 3);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let p = m.transition_matrix();
        for r in p.row_iter() {
            assert!((r.sum() - 1.0).abs() <= 1e-12);
        }
        assert!((m.lambdas()[0] - 1.0).abs() <= 1e-8);
        for &l in m.lambdas().iter() {
            assert!((-1e-10..=1.0 + 1e-10).contains(&l));
        }
        for n in 0..10 {
            let psi = m.psi().column(n).into_owned();
            let res = &p * &psi - &psi * m.lambdas()[n];
            assert!(res.norm() <= 1e-8 * psi.norm());
        }
        assert!(m.q().iter().all(|v| *v > 0.0));
        assert!(m.d_alpha().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn half_circle_coordinate_is_monotone_in_angle() {
        let (ps, angles) = circle(60, 0.0, 2.0 * PI);
        let spec = DiffusionSpec::new(KernelSpec::new(0.1).unwrap(), 2);
        let m = fit_dmaps(&ps, &spec).unwrap();
        // the leading pair on a full circle is (cos, sin)-like; any half circle
        // pattern of the first coordinate has to be injective on some half.
        let y: Vec<f64> = m.coords().column(0).iter().copied().collect();
        let best = (0..60)
            .map(|start| {
                let idx: Vec<usize> = (0..30).map(|k| (start + k) % 60).collect();
                let a: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
                let b: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                spearman(&a, &b).abs()
            })
            .fold(0.0, f64::max);
        assert!((best - 1.0).abs() < 1e-12, "best |rho| = {best}");
        assert_eq!(angles.len(), 60);
    }

    #[test]
    fn arc_coordinate_monotone() {
        let (ps, angles) = circle(50, 0.0, PI / 2.0);
        let spec = DiffusionSpec::new(KernelSpec::new(0.2).unwrap(), 1);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let y: Vec<f64> = m.embed(1).unwrap().iter().copied().collect();
        assert!((spearman(&y, &angles).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_slicing_and_sign_convention() {
        let (ps, _) = circle(30, 0.1, 3.0);
        let spec = DiffusionSpec::new(KernelSpec::new(0.08).unwrap(), 3);
        let m = fit_dmaps(&ps, &spec).unwrap();
        assert_eq!(&m.embed(3).unwrap(), m.coords());
        assert!(m.embed(0).is_err());
        assert!(m.embed(4).is_err());
        let flipped = DiffusionModel::assemble(
            m.train.clone(),
            m.spec,
            m.q.clone(),
            m.d_alpha.clone(),
            m.kalpha.clone(),
            m.markov_sym.clone(),
            m.eigen.negated(),
        )
        .unwrap();
        assert_eq!(flipped.embed(3).unwrap(), m.embed(3).unwrap());
        for c in 0..3 {
            let col = m.coords().column(c);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (ps, _) = circle(25, 0.3, 2.0);
        let spec = DiffusionSpec::new(KernelSpec::new(0.1).unwrap(), 2);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let perm: Vec<usize> = (0..25).map(|i| (i * 7 + 3) % 25).collect();
        let mp = fit_dmaps(&ps.permuted(&perm), &spec).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((mp.coords()[(row, c)] - m.coords()[(src, c)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nystrom_reproduces_training_values() {
        let (ps, _) = circle(30, 0.0, 2.0);
        let spec = DiffusionSpec::new(KernelSpec::new(0.1).unwrap(), 3);
        let m = fit_dmaps(&ps, &spec).unwrap();
        for i in [0, 7, 29] {
            let ext = m.nystrom_extend(ps.point(i)).unwrap();
            for (j, v) in ext.iter().enumerate() {
                assert!((v - m.psi()[(i, j + 1)]).abs() < 1e-8);
            }
            let phi = m.extend_phi(ps.point(i), 5).unwrap();
            for (n, v) in phi.iter().enumerate() {
                assert!((v - m.phi()[(i, n)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn far_query_is_a_convex_combination() {
        let (ps, _) = circle(30, 0.0, 2.0);
        let eps = 0.1;
        let spec = DiffusionSpec::new(KernelSpec::new(eps).unwrap(), 2);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let far = [1.0 + 8.0 * eps.sqrt(), 0.0];
        let ext = m.nystrom_extend(&far).unwrap();
        for (j, v) in ext.iter().enumerate() {
            let col = m.psi().column(j + 1);
            let bound = col.amax() / m.lambdas()[j + 1];
            // row-stochastic average then divided by λ_j
            assert!(v.abs() <= bound + 1e-8);
        }
        let p = m.transition_row(&far).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn midpoint_extension_close_to_refit() {
        let n = 40;
        let (ps, angles) = circle(n, 0.0, PI / 2.0);
        let spec = DiffusionSpec::new(KernelSpec::new(0.2).unwrap(), 1);
        let m = fit_dmaps(&ps, &spec).unwrap();
        let i = 17;
        let mid_t = 0.5 * (angles[i] + angles[i + 1]);
        let mid = [mid_t.cos(), mid_t.sin()];
        let ext = m.nystrom_extend(&mid).unwrap()[0];
        let (a, b) = (m.psi()[(i, 1)], m.psi()[(i + 1, 1)]);
        assert!(ext > a.min(b) && ext < a.max(b));
        // oracle: re-fit with the midpoint included
        let refit = fit_dmaps(&ps.with_point(&mid).unwrap(), &spec).unwrap();
        let mut oracle = refit.psi()[(n, 1)];
        let ra = refit.psi()[(i, 1)];
        // align orientation of the oracle with the original fit
        if (ra - a).abs() > (ra + a).abs() {
            oracle = -oracle;
        }
        assert!((ext - oracle).abs() <= 0.05 * oracle.abs().max((a - b).abs()));
    }
}
