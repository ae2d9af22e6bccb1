//! Normalization, similarity, and pooling primitives, plus the validated
//! tensor types they produce.
//!
//! Every operation exists in two forms: a plain-array version for data
//! preparation and evaluation, and a differentiable version under [`diff`]
//! that builds the same computation on an autodiff graph.

use ndarray::{Array2, Array4, ArrayView1, Axis};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Default stabilizer for the zero-to-zero normalization convention.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance used when validating unit-norm and sums-to-one invariants.
pub const NORM_TOL: f64 = 1e-5;

/// Per-pixel D-dimensional unit vectors, shape (N, D, H, W).
#[derive(Debug, Clone)]
pub struct EmbeddingMap<F: Scalar>(Array4<F>);

/// Per-pixel M-way cluster probabilities, shape (N, M, H, W).
#[derive(Debug, Clone)]
pub struct ClusterProbMap<F: Scalar>(Array4<F>);

/// M cluster center embeddings, shape (M, D); rows are unit vectors except
/// empty-cluster rows, which are all-zero.
#[derive(Debug, Clone)]
pub struct ClusterCenters<F: Scalar>(Array2<F>);

/// Per-patch unit embeddings from adaptive pooling, shape (N, D, G, G).
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet<F: Scalar>(Array4<F>);

impl<F: Scalar> EmbeddingMap<F> {
    pub fn new(values: Array4<F>) -> Result<Self> {
        validate_unit_channel_norms(&values, "embedding map")?;
        Ok(EmbeddingMap(values))
    }

    pub fn values(&self) -> &Array4<F> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<F> {
        self.0
    }

    /// (N, D, H, W)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

impl<F: Scalar> ClusterProbMap<F> {
    pub fn new(values: Array4<F>) -> Result<Self> {
        let tol = F::of_f64(NORM_TOL);
        for v in values.iter() {
            if !v.is_finite() || *v < -tol || *v > F::one() + tol {
                return Err(Error::invalid(
                    "cluster probability map",
                    format!("entry {v} outside [0,1]"),
                ));
            }
        }
        let sums = values.sum_axis(Axis(1));
        for s in sums.iter() {
            if (*s - F::one()).abs() > tol {
                return Err(Error::invalid(
                    "cluster probability map",
                    format!("pixel sums to {s}, expected 1"),
                ));
            }
        }
        Ok(ClusterProbMap(values))
    }

    pub fn values(&self) -> &Array4<F> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<F> {
        self.0
    }

    /// (N, M, H, W)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

impl<F: Scalar> ClusterCenters<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        let tol = F::of_f64(NORM_TOL);
        for row in values.outer_iter() {
            let norm = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
            if !norm.is_finite() {
                return Err(Error::invalid("cluster centers", "non-finite row"));
            }
            // Zero rows stand for empty clusters under the eps convention.
            if norm > tol && (norm - F::one()).abs() > tol {
                return Err(Error::invalid(
                    "cluster centers",
                    format!("row norm {norm}, expected 1 or 0"),
                ));
            }
        }
        Ok(ClusterCenters(values))
    }

    pub fn values(&self) -> &Array2<F> {
        &self.0
    }

    /// (M, D)
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

impl<F: Scalar> PatchEmbeddingSet<F> {
    pub fn new(values: Array4<F>) -> Result<Self> {
        validate_unit_channel_norms(&values, "patch embedding set")?;
        Ok(PatchEmbeddingSet(values))
    }

    pub fn values(&self) -> &Array4<F> {
        &self.0
    }

    /// (N, D, G, G)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

fn validate_unit_channel_norms<F: Scalar>(values: &Array4<F>, what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(what, "non-finite entry"));
    }
    let tol = F::of_f64(NORM_TOL);
    let sq = values.mapv(|v| v * v).sum_axis(Axis(1));
    for s in sq.iter() {
        if (s.sqrt() - F::one()).abs() > tol {
            return Err(Error::invalid(
                what,
                format!("vector norm {}, expected 1", s.sqrt()),
            ));
        }
    }
    Ok(())
}

/// Scale each channel vector to unit L2 norm: x / max(|x|_2, eps).
/// Zero vectors map to zero.
pub fn l2_normalize<F: Scalar>(x: &Array4<F>, eps: F) -> Result<Array4<F>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("l2_normalize input", "non-finite entry"));
    }
    let mut out = x.clone();
    let norms = x.mapv(|v| v * v).sum_axis(Axis(1)).mapv(|s| s.sqrt().max(eps));
    for (mut ch, _) in out.axis_iter_mut(Axis(1)).zip(0..) {
        ch.zip_mut_with(&norms, |v, n| *v /= *n);
    }
    Ok(out)
}

/// Scale each nonnegative channel vector to unit L1 norm: x / max(|x|_1, eps).
/// Zero vectors map to zero.
pub fn l1_normalize<F: Scalar>(x: &Array4<F>, eps: F) -> Result<Array4<F>> {
    if x.iter().any(|v| !v.is_finite() || *v < F::zero()) {
        return Err(Error::invalid(
            "l1_normalize input",
            "entries must be finite and nonnegative",
        ));
    }
    let mut out = x.clone();
    let sums = x.sum_axis(Axis(1)).mapv(|s| s.max(eps));
    for (mut ch, _) in out.axis_iter_mut(Axis(1)).zip(0..) {
        ch.zip_mut_with(&sums, |v, n| *v /= *n);
    }
    Ok(out)
}

/// Normalize a single vector to unit L2 norm with the same eps convention.
pub fn l2_normalize_vec<F: Scalar>(x: &[F], eps: F) -> Vec<F> {
    let norm = x.iter().map(|v| *v * *v).sum::<F>().sqrt().max(eps);
    x.iter().map(|v| *v / norm).collect()
}

/// Inner product of two unit vectors.
pub fn cosine_similarity<F: Scalar>(c: ArrayView1<F>, v: ArrayView1<F>) -> F {
    c.dot(&v)
}

/// Cell k of a length-`len` axis split into `grid` near-equal spans:
/// [floor(k*len/grid), ceil((k+1)*len/grid)).
pub(crate) fn pool_span(idx: usize, len: usize, grid: usize) -> (usize, usize) {
    let start = idx * len / grid;
    let end = ((idx + 1) * len).div_ceil(grid).min(len);
    (start, end)
}

/// Average an embedding map over grid x grid cells, then renormalize each
/// patch vector to the unit sphere.
pub fn adaptive_average_pool<F: Scalar>(
    v: &EmbeddingMap<F>,
    grid: usize,
) -> Result<PatchEmbeddingSet<F>> {
    let (n, d, h, w) = v.dim();
    if grid == 0 || grid > h || grid > w {
        return Err(Error::Config(format!(
            "pool grid {grid} invalid for {h}x{w} input"
        )));
    }
    let x = v.values();
    let mut out = Array4::<F>::zeros((n, d, grid, grid));
    for ni in 0..n {
        for di in 0..d {
            for gy in 0..grid {
                let (y0, y1) = pool_span(gy, h, grid);
                for gx in 0..grid {
                    let (x0, x1) = pool_span(gx, w, grid);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x[[ni, di, y, xx]];
                        }
                    }
                    out[[ni, di, gy, gx]] =
                        acc / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
    }
    let normalized = l2_normalize(&out, F::of_f64(NORM_EPS))?;
    PatchEmbeddingSet::new(normalized)
}

/// Differentiable versions of the primitives, built on the autodiff graph.
pub mod diff {
    use crate::autodiff::{Scalar, Tensor};

    /// x / max(|x|_2, eps) along `axis`.
    pub fn l2_normalize<'g, F: Scalar>(x: Tensor<'g, F>, axis: usize, eps: F) -> Tensor<'g, F> {
        let norm = (x * x).sum_axes(&[axis]).sqrt().clamp_min(eps);
        x / norm
    }

    /// x / max(|x|_1, eps) along `axis`; assumes nonnegative input.
    pub fn l1_normalize<'g, F: Scalar>(x: Tensor<'g, F>, axis: usize, eps: F) -> Tensor<'g, F> {
        let sum = x.sum_axes(&[axis]).clamp_min(eps);
        x / sum
    }

    /// Per-position inner product along `axis` (keeps it as size 1).
    /// Equals cosine similarity when both inputs are unit-normalized.
    pub fn cosine_similarity<'g, F: Scalar>(
        a: Tensor<'g, F>,
        b: Tensor<'g, F>,
        axis: usize,
    ) -> Tensor<'g, F> {
        (a * b).sum_axes(&[axis])
    }

    /// Adaptive average pooling onto grid x grid followed by per-patch
    /// renormalization.
    pub fn adaptive_average_pool<'g, F: Scalar>(
        v: Tensor<'g, F>,
        grid: usize,
        eps: F,
    ) -> Tensor<'g, F> {
        l2_normalize(v.adaptive_avg_pool(grid), 1, eps)
    }
}
