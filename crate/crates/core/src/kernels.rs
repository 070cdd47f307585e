//! Gaussian kernels, Gram matrices and the median bandwidth heuristic.

use faer::{Mat, MatRef};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest point count used for the pairwise-distance median.
pub const MEDIAN_MAX_POINTS: usize = 1000;
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6d65_6469_616e;

/// Gaussian kernel `k(u, v) = exp(-|u - v|^2 / (2 h^2))` acting on a subset of
/// the columns of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
    pub feature_columns: Vec<usize>,
}

impl KernelSpec {
    pub fn new(bandwidth: f64, feature_columns: Vec<usize>) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(KernelSpec {
            bandwidth,
            feature_columns,
        })
    }

    /// Kernel over all `d` columns.
    pub fn all_columns(bandwidth: f64, d: usize) -> Result<Self> {
        Self::new(bandwidth, (0..d).collect())
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

fn selected(points: MatRef<'_, f64>, cols: &[usize]) -> Vec<Vec<f64>> {
    (0..points.nrows())
        .map(|i| cols.iter().map(|&c| points[(i, c)]).collect())
        .collect()
}

/// Cross Gram matrix between the rows of `points_a` and `points_b`.
///
/// Squared distances are accumulated coordinate-wise so that `gram(a, b)` is
/// exactly the transpose of `gram(b, a)` and self-similarities are exactly 1.
pub fn gram(points_a: MatRef<'_, f64>, points_b: MatRef<'_, f64>, spec: &KernelSpec) -> Result<Mat<f64>> {
    if !(spec.bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {}",
            spec.bandwidth
        )));
    }
    if points_a.ncols() != points_b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "gram inputs have {} and {} columns",
            points_a.ncols(),
            points_b.ncols()
        )));
    }
    if let Some(&c) = spec.feature_columns.iter().find(|&&c| c >= points_a.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "kernel column {c} out of range for {} input columns",
            points_a.ncols()
        )));
    }
    let a = selected(points_a, &spec.feature_columns);
    let b = selected(points_b, &spec.feature_columns);
    Ok(Mat::from_fn(a.len(), b.len(), |i, j| spec.eval(&a[i], &b[j])))
}

/// Symmetric Gram matrix of a point set with itself.
pub fn self_gram(points: MatRef<'_, f64>, spec: &KernelSpec) -> Result<Mat<f64>> {
    gram(points, points, spec)
}

/// Median of pairwise Euclidean distances over distinct pairs, falling back
/// to 1.0 when that median is zero. Inputs larger than
/// [`MEDIAN_MAX_POINTS`] are subsampled with a fixed seed.
pub fn median_heuristic(points: MatRef<'_, f64>) -> Result<f64> {
    let m = points.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "median heuristic needs at least 2 points, got {m}"
        )));
    }
    let rows: Vec<usize> = if m > MEDIAN_MAX_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        let mut idx = sample(&mut rng, m, MEDIAN_MAX_POINTS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).collect()
    };
    let d = points.ncols();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (k, &i) in rows.iter().enumerate() {
        for &j in &rows[k + 1..] {
            let d2: f64 = (0..d).map(|c| (points[(i, c)] - points[(j, c)]).powi(2)).sum();
            dists.push(d2.sqrt());
        }
    }
    let med = median(&mut dists);
    Ok(if med > 0.0 && med.is_finite() { med } else { 1.0 })
}

/// Median with the even-length convention of averaging the middle pair.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    let len = values.len();
    let mid = len / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if len % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
