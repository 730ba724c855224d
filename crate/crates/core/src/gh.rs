//! Geometric harmonics: truncated spectral regression on the eigensystem of
//! the training kernel matrix `A = k(X, X)`.
//!
//! With the retained set `S_δ = { j : σ_j > δ σ_0 }` (zero eigenvalues are
//! never retained):
//!
//! ```text
//! μ*      = Σ_{j∈S_δ} (v_jᵀ k*) σ_j⁻¹ (v_jᵀ f)
//! Σ*^GH   = k(x*, x*) − Σ_{j∈S_δ} (v_jᵀ k*)² / σ_j
//! ```
//!
//! The error estimate is the geometric-harmonics extension of the function
//! `k(x*, ·)` subtracted from its true value; it never looks at `f`.
//!
//! Extendability uses squared projections, `Σ_{j∈S_δ} ⟨v_j, f⟩² ≥ (1 − η)‖f‖²`,
//! which is the Parseval-consistent form of the criterion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::EigenSystem;

/// A fitted geometric-harmonics regressor with one or more output columns.
#[derive(Debug, Clone)]
pub struct GhModel {
    es: EigenSystem,
    delta: f64,
    retained: Vec<usize>,
    /// `|S_δ| × outputs` projections `⟨v_j, f⟩`.
    coeffs: DMatrix<f64>,
    f_train: DMatrix<f64>,
}

/// Indices `j` with `σ_j > δ σ_0` and `σ_j > 0`.
pub fn retained_set(es: &EigenSystem, delta: f64) -> Vec<usize> {
    let cut = delta * es.largest();
    es.values()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cut && s > 0.0)
        .map(|(j, _)| j)
        .collect()
}

pub fn fit_gh(es: &EigenSystem, f: &DVector<f64>, delta: f64) -> Result<GhModel> {
    fit_gh_multi(es, &DMatrix::from_column_slice(f.len(), 1, f.as_slice()), delta)
}

/// Fits one coefficient column per column of `f`, sharing the decomposition.
pub fn fit_gh_multi(es: &EigenSystem, f: &DMatrix<f64>, delta: f64) -> Result<GhModel> {
    if f.nrows() != es.len() {
        return Err(Error::Input(format!(
            "{} function values for {} training points",
            f.nrows(),
            es.len()
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!("truncation ratio must be >= 0, got {delta}")));
    }
    let retained = retained_set(es, delta);
    if retained.is_empty() {
        return Err(Error::DegenerateModel(format!(
            "no eigenvalue exceeds {delta} times the largest"
        )));
    }
    let coeffs = DMatrix::from_fn(retained.len(), f.ncols(), |r, c| {
        es.vector(retained[r]).dot(&f.column(c))
    });
    Ok(GhModel {
        es: es.clone(),
        delta,
        retained,
        coeffs,
        f_train: f.clone(),
    })
}

impl GhModel {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn f_train(&self) -> &DMatrix<f64> {
        &self.f_train
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.es
    }

    fn check_kstar(&self, kstar: &DVector<f64>) -> Result<()> {
        if kstar.len() != self.es.len() {
            return Err(Error::Input(format!(
                "cross-kernel vector of length {} for {} training points",
                kstar.len(),
                self.es.len()
            )));
        }
        Ok(())
    }

    /// Prediction of every output column at a query with cross-kernel `kstar`.
    pub fn predict_multi(&self, kstar: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_kstar(kstar)?;
        let mut out = DVector::zeros(self.coeffs.ncols());
        for (r, &j) in self.retained.iter().enumerate() {
            let w = self.es.vector(j).dot(kstar) / self.es.value(j);
            for c in 0..out.len() {
                out[c] += w * self.coeffs[(r, c)];
            }
        }
        Ok(out)
    }

    /// Prediction of the first output column.
    pub fn predict(&self, kstar: &DVector<f64>) -> Result<f64> {
        Ok(self.predict_multi(kstar)?[0])
    }

    /// Error estimate `k(x*, x*) − k̂(x*, x*)`.
    pub fn error(&self, kstar: &DVector<f64>, kss: f64) -> Result<f64> {
        self.check_kstar(kstar)?;
        Ok(truncated_error(&self.es, &self.retained, kstar, kss))
    }
}

pub fn gh_predict(model: &GhModel, kstar: &DVector<f64>) -> Result<f64> {
    model.predict(kstar)
}

pub fn gh_error(model: &GhModel, kstar: &DVector<f64>, kss: f64) -> Result<f64> {
    model.error(kstar, kss)
}

fn truncated_error(es: &EigenSystem, retained: &[usize], kstar: &DVector<f64>, kss: f64) -> f64 {
    let approx: f64 = retained
        .iter()
        .map(|&j| {
            let p = es.vector(j).dot(kstar);
            p * p / es.value(j)
        })
        .sum();
    kss - approx
}

/// Outcome of the (η, δ)-extendability test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extendability {
    pub extendable: bool,
    /// `Σ_{j∈S_δ} ⟨v_j, f⟩² / ‖f‖²`.
    pub captured_fraction: f64,
}

pub fn extendability_check(
    es: &EigenSystem,
    f: &DVector<f64>,
    eta: f64,
    delta: f64,
) -> Result<Extendability> {
    if f.len() != es.len() {
        return Err(Error::Input(format!(
            "{} function values for {} training points",
            f.len(),
            es.len()
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("eta must be positive, got {eta}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::Parameter(format!("delta must be >= 0, got {delta}")));
    }
    let norm2 = f.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::UndefinedFraction);
    }
    let cut = delta * es.largest();
    // δ = 0 keeps the whole basis, zero eigenvalues included, so the
    // fraction is exactly Parseval's identity.
    let captured: f64 = (0..es.len())
        .filter(|&j| if delta == 0.0 { true } else { es.value(j) > cut })
        .map(|j| {
            let p = es.vector(j).dot(f);
            p * p
        })
        .sum();
    let captured_fraction = captured / norm2;
    Ok(Extendability {
        extendable: captured_fraction >= 1.0 - eta,
        captured_fraction,
    })
}
