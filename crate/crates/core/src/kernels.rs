//! Point clouds, pairwise distances and the squared-exponential kernel
//! `K_ε(x, y) = exp(-d(x, y)² / (2ε))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// `N` points in `n`-dimensional ambient space, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    data: Vec<f64>,
    dim: usize,
}

impl PointSet {
    /// Builds a point set from a flat row-major buffer.
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("ambient dimension must be at least 1".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "buffer of length {} does not hold a whole number of {dim}-dimensional points",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite coordinate in point {}",
                pos / dim
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::Input("rows have differing dimensions".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_flat(data, dim)
    }

    /// One-dimensional point set from scalar coordinates.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Column `j` of the coordinate matrix (coordinate `j` of every point).
    pub fn column(&self, j: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.iter().map(|p| p[j]))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Returns a new set with `point` appended.
    pub fn with_point(&self, point: &[f64]) -> Result<Self> {
        if point.len() != self.dim {
            return Err(Error::Input(format!(
                "point of dimension {} appended to {}-dimensional set",
                point.len(),
                self.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(point);
        Self::from_flat(data, self.dim)
    }

    /// Applies a permutation: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm
            .iter()
            .flat_map(|&i| self.point(i).iter().copied())
            .collect();
        Self {
            data,
            dim: self.dim,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How kernel distances are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Ambient Euclidean distance between point coordinates.
    #[default]
    Euclidean,
    /// Distances supplied by the caller (for example geodesic arclengths).
    Precomputed,
}

/// Bandwidth and distance mode of the squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub epsilon: f64,
    pub distance_mode: DistanceMode,
}

impl KernelSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        let spec = Self {
            epsilon,
            distance_mode: DistanceMode::Euclidean,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn precomputed(epsilon: f64) -> Result<Self> {
        let spec = Self {
            epsilon,
            distance_mode: DistanceMode::Precomputed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Kernel value from a squared distance.
    #[inline]
    pub fn eval_sq(&self, d2: f64) -> f64 {
        if d2 == 0.0 {
            1.0
        } else {
            (-d2 / (2.0 * self.epsilon)).exp()
        }
    }
}

/// Symmetric matrix of nonnegative pairwise distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    /// Validates an externally supplied distance matrix.  The triangle
    /// inequality is not checked.
    pub fn new(d: DMatrix<f64>) -> Result<Self> {
        if !d.is_square() || d.nrows() == 0 {
            return Err(Error::Input("distance matrix must be square and non-empty".into()));
        }
        let n = d.nrows();
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(Error::Input(format!("nonzero diagonal entry at {i}")));
            }
            for j in 0..n {
                let v = d[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Input(format!("invalid distance {v} at ({i}, {j})")));
                }
                if v != d[(j, i)] {
                    return Err(Error::Input(format!("asymmetric distance at ({i}, {j})")));
                }
            }
        }
        Ok(Self { d })
    }

    /// Builds a distance matrix from a symmetric distance function.
    pub fn from_fn<F: Fn(usize, usize) -> f64>(n: usize, dist: F) -> Result<Self> {
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = dist(i, j);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        Self::new(d)
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Distances between distinct pairs `i < j`.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.d[(i, j)]);
            }
        }
        out
    }
}

/// Euclidean distance matrix `d_ij = ‖x_i − x_j‖₂`.
pub fn pairwise_distances(ps: &PointSet) -> DistanceMatrix {
    let n = ps.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = squared_distance(ps.point(i), ps.point(j)).sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    DistanceMatrix { d }
}

/// `K_ij = exp(-d_ij² / 2ε)` from a distance matrix.
pub fn kernel_matrix(dist: &DistanceMatrix, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = dist.len();
    Ok(symmetric_from_upper(n, Execution::Sequential, |i, j| {
        let d = dist.get(i, j);
        spec.eval_sq(d * d)
    }))
}

/// Kernel matrix of a point set computed from squared Euclidean distances
/// directly (no square root round trip).
pub fn kernel_matrix_from_points(ps: &PointSet, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    kernel_matrix_from_points_with(ps, spec, Execution::default())
}

pub fn kernel_matrix_from_points_with(
    ps: &PointSet,
    spec: &KernelSpec,
    exec: Execution,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    require_euclidean(spec)?;
    Ok(symmetric_from_upper(ps.len(), exec, |i, j| {
        spec.eval_sq(squared_distance(ps.point(i), ps.point(j)))
    }))
}

/// Vector `k(x*, X)` of kernel values between a query and every training point.
pub fn cross_kernel(train: &PointSet, query: &[f64], spec: &KernelSpec) -> Result<DVector<f64>> {
    spec.validate()?;
    require_euclidean(spec)?;
    check_dim(train, query)?;
    Ok(DVector::from_iterator(
        train.len(),
        train.iter().map(|p| spec.eval_sq(squared_distance(p, query))),
    ))
}

/// Cross-kernel vector from a caller-supplied row of distances to the
/// training points.
pub fn cross_kernel_from_distances(row: &[f64], spec: &KernelSpec) -> Result<DVector<f64>> {
    spec.validate()?;
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("invalid distance {v} in query row")));
    }
    Ok(DVector::from_iterator(
        row.len(),
        row.iter().map(|d| spec.eval_sq(d * d)),
    ))
}

/// Cross-kernel matrix with one row per query point.
pub fn cross_kernel_matrix(
    train: &PointSet,
    queries: &PointSet,
    spec: &KernelSpec,
    exec: Execution,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    require_euclidean(spec)?;
    if queries.dim() != train.dim() {
        return Err(Error::Input(format!(
            "query dimension {} differs from training dimension {}",
            queries.dim(),
            train.dim()
        )));
    }
    let n = train.len();
    let rows = exec.map_range(queries.len(), |q| {
        let x = queries.point(q);
        train
            .iter()
            .map(|p| spec.eval_sq(squared_distance(p, x)))
            .collect::<Vec<_>>()
    });
    Ok(DMatrix::from_fn(queries.len(), n, |q, i| rows[q][i]))
}

/// Median-distance bandwidth heuristic: `ε = median(d_ij)² / 2` over
/// distinct pairs.
pub fn median_heuristic_epsilon(dist: &DistanceMatrix) -> Result<f64> {
    let mut pairs = dist.upper_triangle();
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "bandwidth heuristic needs at least two points".into(),
        ));
    }
    let m = median_in_place(&mut pairs);
    if m <= 0.0 {
        return Err(Error::Parameter(
            "median pairwise distance is zero; bandwidth heuristic undefined".into(),
        ));
    }
    Ok(m * m / 2.0)
}

/// Median of a nonempty slice (mean of the two central values for even length).
pub fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn require_euclidean(spec: &KernelSpec) -> Result<()> {
    if spec.distance_mode != DistanceMode::Euclidean {
        return Err(Error::Input(
            "precomputed distance mode needs caller-supplied distances".into(),
        ));
    }
    Ok(())
}

fn check_dim(train: &PointSet, query: &[f64]) -> Result<()> {
    if query.len() != train.dim() {
        return Err(Error::Input(format!(
            "query dimension {} differs from training dimension {}",
            query.len(),
            train.dim()
        )));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite query coordinate".into()));
    }
    Ok(())
}

/// Fills a symmetric matrix with unit diagonal from its strict upper triangle.
fn symmetric_from_upper<F>(n: usize, exec: Execution, entry: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Send + Sync,
{
    let rows = exec.map_range(n, |i| ((i + 1)..n).map(|j| entry(i, j)).collect::<Vec<_>>());
    let mut k = DMatrix::identity(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}
