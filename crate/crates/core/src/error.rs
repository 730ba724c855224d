use thiserror::Error;

/// Errors produced by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed input data: wrong shapes, non-finite values, asymmetry.
    #[error("invalid input: {0}")]
    Input(String),
    /// A parameter outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },
    /// The kernel leaves at least one point without neighbours (bandwidth too small).
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),
    #[error("ill-posed extension: eigenvalue {eigenvalue:e} of coordinate {index} is too small to divide by")]
    IllPosedExtension { index: usize, eigenvalue: f64 },
    #[error("conditioning failure: {0}")]
    Conditioning(String),
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("captured fraction undefined for a function of zero norm")]
    UndefinedFraction,
    #[error("point {0:?} is outside the objective domain")]
    Domain(Vec<f64>),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
}

pub type Result<T> = std::result::Result<T, Error>;
