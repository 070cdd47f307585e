//! OLS, best linear projection of the CATE with HC3 standard errors, and the
//! doubly robust ATE.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::scores::ScoreVector;

/// Relative residual norm below which a centered column counts as linearly
/// dependent on the previous ones.
const RANK_TOL: f64 = 1e-10;

/// Ordinary least squares of `y` on `(1, X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// `"(Intercept)"` followed by the column names.
    pub terms: Vec<String>,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Diagonal of the hat matrix of `(1, X)`.
    pub leverage: Vec<f64>,
    /// `(XᵀX)⁻¹` of the design `(1, X)`.
    pub xtx_inv: Vec<Vec<f64>>,
}

fn col_norm(m: &Mat<f64>, j: usize) -> f64 {
    (0..m.nrows()).map(|i| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt()
}

/// Thin QR of `m` by modified Gram-Schmidt with one reorthogonalization pass.
/// Returns the indices of dependent columns instead when rank deficient.
fn mgs_qr(m: MatRef<'_, f64>) -> std::result::Result<(Mat<f64>, Mat<f64>), Vec<usize>> {
    let (n, p) = (m.nrows(), m.ncols());
    let mut q = m.to_owned();
    let mut r = Mat::<f64>::zeros(p, p);
    let mut dependent = Vec::new();
    for j in 0..p {
        let original = col_norm(&q, j);
        for _pass in 0..2 {
            for k in 0..j {
                let c: f64 = (0..n).map(|i| q[(i, k)] * q[(i, j)]).sum();
                r[(k, j)] += c;
                for i in 0..n {
                    q[(i, j)] -= c * q[(i, k)];
                }
            }
        }
        let norm = col_norm(&q, j);
        if !(norm > RANK_TOL * original.max(f64::MIN_POSITIVE)) || original == 0.0 {
            dependent.push(j);
            continue;
        }
        r[(j, j)] = norm;
        for i in 0..n {
            q[(i, j)] /= norm;
        }
    }
    if dependent.is_empty() {
        Ok((q, r))
    } else {
        Err(dependent)
    }
}

/// Inverse of an upper-triangular matrix.
fn upper_inverse(r: &Mat<f64>) -> Mat<f64> {
    let p = r.nrows();
    let mut inv = Mat::<f64>::zeros(p, p);
    for j in 0..p {
        inv[(j, j)] = 1.0 / r[(j, j)];
        for i in (0..j).rev() {
            let s: f64 = (i + 1..=j).map(|k| r[(i, k)] * inv[(k, j)]).sum();
            inv[(i, j)] = -s / r[(i, i)];
        }
    }
    inv
}

/// OLS of `y` on an intercept and the columns of `x`.
///
/// Slopes are solved on centered data and the intercept recovered as
/// `ȳ - x̄ᵀβ`, so an empty `x` gives exactly the sample mean.
pub fn ols(x: MatRef<'_, f64>, y: &[f64], names: &[String]) -> Result<OlsFit> {
    let (n, d) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("x has {n} rows, y has {}", y.len())));
    }
    if names.len() != d {
        return Err(Error::DimensionMismatch(format!("{d} columns but {} names", names.len())));
    }
    if n < d + 2 {
        return Err(Error::InvalidArgument(format!(
            "need more than d + 1 = {} units, got {n}",
            d + 1
        )));
    }
    if x.col_iter().flat_map(|c| c.iter().copied().collect::<Vec<_>>()).chain(y.iter().copied()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression inputs contain non-finite values".into()));
    }
    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let x_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / nf).collect();
    let xc = Mat::from_fn(n, d, |i, j| x[(i, j)] - x_mean[j]);
    let (q, r) = mgs_qr(xc.as_ref()).map_err(|cols| Error::RankDeficient(cols.iter().map(|&c| names[c].clone()).collect()))?;
    let r_inv = upper_inverse(&r);
    // β = R⁻¹ Qᵀ y_c
    let qty: Vec<f64> = (0..d).map(|k| (0..n).map(|i| q[(i, k)] * (y[i] - y_mean)).sum()).collect();
    let beta: Vec<f64> = (0..d).map(|j| (j..d).map(|k| r_inv[(j, k)] * qty[k]).sum()).collect();
    let intercept = y_mean - x_mean.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    let mut coefficients = vec![intercept];
    coefficients.extend(&beta);
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - intercept - (0..d).map(|j| x[(i, j)] * beta[j]).sum::<f64>())
        .collect();
    // With centered columns, h_ii = 1/n + |Q_i|².
    let leverage: Vec<f64> = (0..n)
        .map(|i| 1.0 / nf + (0..d).map(|k| q[(i, k)] * q[(i, k)]).sum::<f64>())
        .collect();
    // (XᵀX)⁻¹ for (1, X) from the centered block S⁻¹ = R⁻¹R⁻ᵀ.
    let s_inv = Mat::from_fn(d, d, |i, j| (i.max(j)..d).map(|k| r_inv[(i, k)] * r_inv[(j, k)]).sum::<f64>());
    let s_inv_m: Vec<f64> = (0..d).map(|i| (0..d).map(|k| s_inv[(i, k)] * x_mean[k]).sum()).collect();
    let mut xtx_inv = vec![vec![0.0; d + 1]; d + 1];
    xtx_inv[0][0] = 1.0 / nf + x_mean.iter().zip(&s_inv_m).map(|(a, b)| a * b).sum::<f64>();
    for i in 0..d {
        xtx_inv[0][i + 1] = -s_inv_m[i];
        xtx_inv[i + 1][0] = -s_inv_m[i];
        for j in 0..d {
            xtx_inv[i + 1][j + 1] = s_inv[(i, j)];
        }
    }
    let mut terms = vec!["(Intercept)".to_string()];
    terms.extend(names.iter().cloned());
    Ok(OlsFit {
        terms,
        coefficients,
        residuals,
        leverage,
        xtx_inv,
    })
}

/// Two-sided normal p-value of `estimate / se`.
pub fn p_normal(estimate: f64, se: f64) -> f64 {
    if se > 0.0 {
        erfc((estimate / se).abs() / std::f64::consts::SQRT_2)
    } else if estimate == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlpResult {
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub hc3_se: Vec<f64>,
    pub p_normal: Vec<f64>,
    pub n_used: usize,
}

/// Best linear projection of the CATE on `(1, X)`: OLS of the scores with
/// HC3 standard errors. Covariates enter on their raw scale.
pub fn best_linear_projection(x: MatRef<'_, f64>, gamma: &ScoreVector, names: &[String]) -> Result<BlpResult> {
    let fit = ols(x, &gamma.gamma, names)?;
    let (n, p) = (x.nrows(), x.ncols() + 1);
    let design = |i: usize, j: usize| if j == 0 { 1.0 } else { x[(i, j - 1)] };
    let mut meat = vec![vec![0.0; p]; p];
    for i in 0..n {
        let h = fit.leverage[i];
        if 1.0 - h <= 1e-10 {
            return Err(Error::UnitLeverage { unit: i + 1 });
        }
        let w = (fit.residuals[i] / (1.0 - h)).powi(2);
        for a in 0..p {
            let xa = design(i, a) * w;
            for b in 0..p {
                meat[a][b] += xa * design(i, b);
            }
        }
    }
    let bread = &fit.xtx_inv;
    let mut hc3_se = Vec::with_capacity(p);
    for j in 0..p {
        let mut v = 0.0;
        for a in 0..p {
            for b in 0..p {
                v += bread[j][a] * meat[a][b] * bread[b][j];
            }
        }
        hc3_se.push(v.max(0.0).sqrt());
    }
    let p_normal = fit
        .coefficients
        .iter()
        .zip(&hc3_se)
        .map(|(&c, &s)| self::p_normal(c, s))
        .collect();
    Ok(BlpResult {
        terms: fit.terms,
        coefficients: fit.coefficients,
        hc3_se,
        p_normal,
        n_used: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub estimate: f64,
    /// `sd(Γ) / √n`.
    pub se: f64,
    pub n_used: usize,
}

/// Sample mean of the scores and its plain standard error.
pub fn ate(gamma: &ScoreVector) -> Result<AteResult> {
    let g = &gamma.gamma;
    let n = g.len();
    if n < 2 {
        return Err(Error::TooFewUnits(n));
    }
    let nf = n as f64;
    let estimate = g.iter().sum::<f64>() / nf;
    let var = g.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(AteResult {
        estimate,
        se: (var / nf).sqrt(),
        n_used: n,
    })
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// BLP and ATE side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub blp: BlpResult,
    pub ate: AteResult,
    pub ate_p_normal: f64,
    pub notes: Vec<String>,
}

impl InferenceReport {
    pub fn new(blp: BlpResult, ate: AteResult) -> Self {
        InferenceReport {
            ate_p_normal: p_normal(ate.estimate, ate.se),
            blp,
            ate,
            notes: vec![
                "BLP standard errors are HC3; the ATE standard error is sd/sqrt(n)".into(),
                "covariates enter the projection unstandardized".into(),
                "stars use a two-sided normal approximation".into(),
            ],
        }
    }

    /// Aligned text table with `(BLP)` and `(ATE)` columns.
    pub fn to_text(&self) -> String {
        let cell = |est: f64, se: f64, p: f64| format!("{est:.2} ({se:.2}){}", stars(p));
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for (j, term) in self.blp.terms.iter().enumerate() {
            let blp = cell(self.blp.coefficients[j], self.blp.hc3_se[j], self.blp.p_normal[j]);
            let ate = if j == 0 {
                cell(self.ate.estimate, self.ate.se, self.ate_p_normal)
            } else {
                String::new()
            };
            rows.push((term.clone(), blp, ate));
        }
        let nobs = self.blp.n_used.to_string();
        rows.push(("Num. obs.".into(), nobs.clone(), self.ate.n_used.to_string()));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(11);
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(5);
        let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0).max(5);
        let rule = "-".repeat(w0 + w1 + w2 + 4);
        let mut s = String::new();
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!("{:<w0$}  {:<w1$}  {:<w2$}\n", "", "(BLP)", "(ATE)"));
        s.push_str(&rule);
        s.push('\n');
        let last = rows.len() - 1;
        for (k, (t, b, a)) in rows.iter().enumerate() {
            if k == last {
                s.push_str(&rule);
                s.push('\n');
            }
            s.push_str(format!("{t:<w0$}  {b:<w1$}  {a:<w2$}").trim_end());
            s.push('\n');
        }
        s.push_str(&rule);
        s.push('\n');
        s.push_str("***p<0.001; **p<0.01; *p<0.05\n");
        s
    }

    /// `column,term,estimate,se,p_normal` rows for both columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("column,term,estimate,se,p_normal\n");
        for j in 0..self.blp.terms.len() {
            s.push_str(&format!(
                "blp,{},{},{},{}\n",
                self.blp.terms[j], self.blp.coefficients[j], self.blp.hc3_se[j], self.blp.p_normal[j]
            ));
        }
        s.push_str(&format!(
            "ate,(Intercept),{},{},{}\n",
            self.ate.estimate, self.ate.se, self.ate_p_normal
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{dr_scores, ScoreKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(g: Vec<f64>) -> ScoreVector {
        let n = g.len();
        let mut s = dr_scores(&vec![0.0; n], &vec![0; n], &vec![0.0; n], &g, &vec![0.0; n], None, vec![0; n]).unwrap();
        s.kind = ScoreKind::Ate;
        s
    }

    fn names(d: usize) -> Vec<String> {
        (1..=d).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn exact_affine_scores_give_exact_coefficients_and_zero_se() {
        let x = Mat::from_fn(8, 2, |i, j| (i as f64) * (j as f64 + 1.0) + ((i * i) % 5) as f64 * j as f64);
        let g: Vec<f64> = (0..8).map(|i| 2.0 + 3.0 * x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
        let blp = best_linear_projection(x.as_ref(), &scores(g), &names(2)).unwrap();
        for (c, e) in blp.coefficients.iter().zip([2.0, 3.0, -0.5]) {
            assert!((c - e).abs() < 1e-10, "{c} vs {e}");
        }
        assert!(blp.hc3_se.iter().all(|s| *s < 1e-10));
    }

    #[test]
    fn intercept_only_matches_ate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 3.0).collect();
        let s = scores(g);
        let blp = best_linear_projection(Mat::<f64>::zeros(30, 0).as_ref(), &s, &[]).unwrap();
        let a = ate(&s).unwrap();
        assert_eq!(blp.coefficients[0], a.estimate);
        // HC3 intercept SE is the mean SE inflated by n/(n-1) leverage terms.
        let n = 30.0;
        assert!((blp.hc3_se[0] - a.se * (n / (n - 1.0)) * ((n - 1.0) / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_ate() {
        let a = ate(&scores(vec![1.5; 10])).unwrap();
        assert_eq!(a.estimate, 1.5);
        assert_eq!(a.se, 0.0);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let x = Mat::from_fn(10, 3, |i, j| if j == 2 { 2.0 * i as f64 } else { (i * (j + 1)) as f64 + (i % 3) as f64 * j as f64 });
        let err = ols(x.as_ref(), &[1.0; 10], &names(3)).unwrap_err();
        match err {
            Error::RankDeficient(cols) => assert_eq!(cols, vec!["x3".to_string()]),
            e => panic!("{e}"),
        }
        let constant = Mat::from_fn(10, 1, |_, _| 4.0);
        assert!(matches!(ols(constant.as_ref(), &[1.0; 10], &names(1)), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn rescaling_a_covariate_rescales_its_coefficient_and_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::from_fn(25, 2, |_, _| rng.random::<f64>());
        let g: Vec<f64> = (0..25).map(|i| x[(i, 0)] + rng.random::<f64>()).collect();
        let s = scores(g);
        let base = best_linear_projection(x.as_ref(), &s, &names(2)).unwrap();
        let scaled_x = Mat::from_fn(25, 2, |i, j| if j == 1 { 7.0 * x[(i, j)] } else { x[(i, j)] });
        let scaled = best_linear_projection(scaled_x.as_ref(), &s, &names(2)).unwrap();
        assert!((scaled.coefficients[2] * 7.0 - base.coefficients[2]).abs() < 1e-10);
        assert!((scaled.hc3_se[2] * 7.0 - base.hc3_se[2]).abs() < 1e-10);
        assert!((scaled.coefficients[1] - base.coefficients[1]).abs() < 1e-10);
    }

    #[test]
    fn full_leverage_unit_is_reported() {
        // The last unit is the only one with x ≠ 0, so it has leverage 1.
        let x = Mat::from_fn(5, 1, |i, _| if i == 4 { 1.0 } else { 0.0 });
        let err = best_linear_projection(x.as_ref(), &scores(vec![1.0, 2.0, 3.0, 4.0, 9.0]), &names(1)).unwrap_err();
        assert!(matches!(err, Error::UnitLeverage { unit: 5 }), "{err}");
    }

    #[test]
    fn stars_and_text_report() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.02), "*");
        assert_eq!(stars(0.2), "");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(40, 2, |_, _| rng.random::<f64>());
        let s = scores((0..40).map(|i| 5.0 * x[(i, 0)] + rng.random::<f64>()).collect());
        let rep = InferenceReport::new(
            best_linear_projection(x.as_ref(), &s, &names(2)).unwrap(),
            ate(&s).unwrap(),
        );
        let text = rep.to_text();
        assert!(text.contains("(BLP)") && text.contains("(ATE)") && text.contains("(Intercept)"));
        assert!(text.contains("***p<0.001; **p<0.01; *p<0.05"));
        assert_eq!(rep.to_csv().lines().count(), 1 + 3 + 1);
    }
}
