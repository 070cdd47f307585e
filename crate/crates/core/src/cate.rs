//! Final-stage regression of pseudo-outcomes on covariates.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Standardizer};
use crate::error::{Error, Result};
use crate::inference::ols;
use crate::kernels::{gram, median_heuristic, self_gram, KernelSpec};
use crate::linalg::{add_diagonal, column, matvec, select_rows, solve_spd, sym_eigen, to_rows, to_vec, JITTER};

/// Default ridge grid: 10 log-spaced points from 1e-4 to 10.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-4.0 + 5.0 * k as f64 / 9.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateFamily {
    KernelRidge,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CateModel {
    KernelRidge {
        /// Standardized training covariates.
        anchors: Vec<Vec<f64>>,
        weights: Vec<f64>,
        /// Training mean of the pseudo-outcomes.
        intercept: f64,
        spec: KernelSpec,
        lambda: f64,
        standardizer: Standardizer,
        /// `2 max|Γ|` over the training scores; a reporting bound only.
        cap: f64,
        /// Clamp predictions to `[-cap, cap]` when set.
        apply_cap: bool,
        /// Mean held-out squared error per grid value.
        cv_scores: Vec<(f64, f64)>,
    },
    Linear {
        terms: Vec<String>,
        /// Intercept first.
        coefficients: Vec<f64>,
    },
}

impl CateModel {
    pub fn family(&self) -> CateFamily {
        match self {
            CateModel::KernelRidge { .. } => CateFamily::KernelRidge,
            CateModel::Linear { .. } => CateFamily::Linear,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CateModel::KernelRidge { standardizer, .. } => standardizer.dim(),
            CateModel::Linear { coefficients, .. } => coefficients.len() - 1,
        }
    }

    /// `τ̂` at every row of `x_new`.
    pub fn predict(&self, x_new: MatRef<'_, f64>) -> Result<Vec<f64>> {
        if x_new.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} covariates, got {}",
                self.dim(),
                x_new.ncols()
            )));
        }
        match self {
            CateModel::KernelRidge {
                anchors,
                weights,
                intercept,
                spec,
                standardizer,
                cap,
                apply_cap,
                ..
            } => {
                let xs = standardizer.transform(x_new)?;
                let a = Mat::from_fn(anchors.len(), xs.ncols(), |i, j| anchors[i][j]);
                let k = gram(xs.as_ref(), a.as_ref(), spec)?;
                Ok(matvec(k.as_ref(), weights)
                    .into_iter()
                    .map(|v| {
                        let t = v + intercept;
                        if *apply_cap {
                            t.clamp(-cap, *cap)
                        } else {
                            t
                        }
                    })
                    .collect())
            }
            CateModel::Linear { coefficients, .. } => Ok((0..x_new.nrows())
                .map(|i| {
                    coefficients[0]
                        + (0..x_new.ncols())
                            .map(|j| coefficients[j + 1] * x_new[(i, j)])
                            .sum::<f64>()
                })
                .collect()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn predict_cate(model: &CateModel, x_new: MatRef<'_, f64>) -> Result<Vec<f64>> {
    model.predict(x_new)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Held-out squared error for each `λ` on one split, from one
/// eigendecomposition of the training Gram matrix.
fn split_errors(k_train: MatRef<'_, f64>, k_val: MatRef<'_, f64>, y_train: &[f64], y_val: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let m = y_train.len();
    let mu = mean(y_train);
    let yc: Vec<f64> = y_train.iter().map(|v| v - mu).collect();
    let eig = sym_eigen(k_train)?;
    let vt_y = matvec(eig.vectors.transpose(), &yc);
    let kv = k_val * &eig.vectors;
    Ok(grid
        .iter()
        .map(|&lam| {
            let coef: Vec<f64> = eig
                .values
                .iter()
                .zip(&vt_y)
                .map(|(&s, &c)| c / (s.max(0.0) + m as f64 * lam + JITTER))
                .collect();
            let pred = matvec(kv.as_ref(), &coef);
            pred.iter().zip(y_val).map(|(p, y)| (p + mu - y).powi(2)).sum::<f64>() / y_val.len() as f64
        })
        .collect())
}

/// Kernel ridge regression `(K + nλI) w = y - ȳ` on standardized covariates
/// with the median-heuristic bandwidth; `λ` chosen from `lambda_grid` by
/// `n_splits`-fold cross-validated squared error against held-out `y`.
/// Ties go to the larger `λ`.
pub fn fit_kernel_ridge(x: MatRef<'_, f64>, y: &[f64], lambda_grid: &[f64], n_splits: usize, seed: u64) -> Result<CateModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("x has {n} rows, scores {}", y.len())));
    }
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty ridge grid".into()));
    }
    if let Some(l) = lambda_grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge grid contains non-positive {l}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pseudo-outcomes".into()));
    }
    let standardizer = Standardizer::fit(x)?;
    let xs = standardizer.transform(x)?;
    let spec = KernelSpec::all_columns(median_heuristic(xs.as_ref())?, xs.ncols())?;
    let k = self_gram(xs.as_ref(), &spec)?;

    let (lambda, cv_scores) = if lambda_grid.len() == 1 {
        (lambda_grid[0], Vec::new())
    } else {
        if n_splits < 2 || n_splits > n {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= n_splits <= n, got n_splits = {n_splits}, n = {n}"
            )));
        }
        let folds = assign_folds(n, n_splits, seed)?;
        let mut totals = vec![0.0; lambda_grid.len()];
        for s in 0..n_splits {
            let tr = folds.complement(s);
            let va = folds.members(s);
            let k_tr = Mat::from_fn(tr.len(), tr.len(), |i, j| k[(tr[i], tr[j])]);
            let k_va = Mat::from_fn(va.len(), tr.len(), |i, j| k[(va[i], tr[j])]);
            let y_tr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            let y_va: Vec<f64> = va.iter().map(|&i| y[i]).collect();
            for (t, e) in totals.iter_mut().zip(split_errors(k_tr.as_ref(), k_va.as_ref(), &y_tr, &y_va, lambda_grid)?) {
                *t += e;
            }
        }
        let scores: Vec<(f64, f64)> = lambda_grid
            .iter()
            .zip(&totals)
            .map(|(&l, &t)| (l, t / n_splits as f64))
            .collect();
        let mut best = 0;
        for (i, &(l, s)) in scores.iter().enumerate().skip(1) {
            let (bl, bs) = scores[best];
            if s < bs || (s == bs && l > bl) {
                best = i;
            }
        }
        (scores[best].0, scores)
    };

    let intercept = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    let mut system = k.clone();
    add_diagonal(&mut system, n as f64 * lambda + JITTER);
    let weights = to_vec(solve_spd(system.as_ref(), column(&yc).as_ref())?.as_ref());
    let cap = 2.0 * y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(CateModel::KernelRidge {
        anchors: to_rows(xs.as_ref()),
        weights,
        intercept,
        spec,
        lambda,
        standardizer,
        cap,
        apply_cap: false,
        cv_scores,
    })
}

/// OLS of the scores on `(1, X)`.
pub fn fit_linear(x: MatRef<'_, f64>, y: &[f64], names: &[String]) -> Result<CateModel> {
    let fit = ols(x, y, names)?;
    Ok(CateModel::Linear {
        terms: fit.terms,
        coefficients: fit.coefficients,
    })
}

/// Weighted-mean squared difference `Σ w (Γ - τ̂)² / Σ w`; the unweighted mean
/// for ATE scores.
pub fn empirical_loss(gamma: &[f64], tau_hat: &[f64]) -> Result<f64> {
    if gamma.len() != tau_hat.len() || gamma.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores, {} predictions",
            gamma.len(),
            tau_hat.len()
        )));
    }
    Ok(gamma.iter().zip(tau_hat).map(|(g, t)| (g - t).powi(2)).sum::<f64>() / gamma.len() as f64)
}

/// Rows of `x` and `y` with positive weight.
pub fn weighted_rows(x: MatRef<'_, f64>, y: &[f64], weights: &[f64]) -> (Mat<f64>, Vec<f64>) {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| weights[i] > 0.0).collect();
    (select_rows(x, &rows), rows.iter().map(|&i| y[i]).collect())
}
