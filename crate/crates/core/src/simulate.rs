//! Simulated proximal data with known bridge functions and CATE.
//!
//! Covariates `X ~ N(0, 0.25 I_5)`, treatment `A | X ~ Bernoulli(1 / (1 +
//! exp(cᵀX)))` with `c = (0.125, 0.125, 0, 0, 0)`, and given `(A, X)` the
//! triple `(Z, W, U)` is Gaussian with unit variances, `cov(Z, W) = 0.25`,
//! `cov(Z, U) = cov(W, U) = 0.5` and means
//! `(0.25 + 0.25A, 0.25 + 0.125A, 0.25 + 0.25A) + bᵀX`, `b = (0.25, 0.25, 0, 0, 0)`.
//! The outcome is `Y ~ N(2 + τ(X)A + bᵀX + 2E[W|U,X] + 2W, 0.25²)` with
//! `E[W|U,X] = 0.25 + bᵀX + 0.5(U - 0.25 - bᵀX)` and `τ(X) = exp(X₁) - 3X₂`.
//!
//! # Oracle bridges
//!
//! Outcome bridge. `W ⊥ (Z, A) | U, X`, so `E[E[W|U,X] | Z, A, X] = E[W | Z, A, X]`
//! and `E[Y | Z, A, X] = 2 + τ(X)A + bᵀX + 4 E[W | Z, A, X]`. Hence
//! `h*(w, a, x) = 2 + τ(x)a + bᵀx + 4w` solves the outcome bridge equation.
//!
//! Treatment bridge. With `W | A, X ~ N(0.25 + 0.125A + bᵀX, 1)`,
//! `1/f(A=a | W, X) = 1 + exp(s_a g(W, X))` where `s_1 = 1`, `s_0 = -1` and
//! `g = cᵀX - 0.125 (W - 0.3125 - bᵀX)`. Given `(W, A = a, X)`, `Z` is normal
//! with mean `μ_Z + 0.25 (W - μ_W)` and variance `0.9375`; the Gaussian
//! moment generating function then shows that
//! `q*(z, a, x) = 1 + exp(s_a (θ_a + θ_z z + θ_xᵀ x))` with `θ_z = -0.5`,
//! `θ_x = c + 0.5 b = (0.25, 0.25, 0, 0, 0)`, `θ_1 = 0.125`, `θ_0 = 0.25`
//! matches `E[q*(Z, a, X) | W, A = a, X] = 1/f(A = a | W, X)` exactly.

use std::time::Instant;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cate::{fit_kernel_ridge, CateModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::ols;
use crate::pipeline::{fit_plearner, PipelineConfig};
use crate::scores::{dr_scores, ScoreVector};
use crate::seeds::derive_seed;

pub const D_X: usize = 5;
pub const B: [f64; D_X] = [0.25, 0.25, 0.0, 0.0, 0.0];
pub const PROPENSITY_COEF: [f64; D_X] = [0.125, 0.125, 0.0, 0.0, 0.0];
pub const X_SD: f64 = 0.5;
pub const Y_SD: f64 = 0.25;
/// Covariance of `(Z, W, U)` given `(A, X)`.
pub const PROXY_COV: [[f64; 3]; 3] = [[1.0, 0.25, 0.5], [0.25, 1.0, 0.5], [0.5, 0.5, 1.0]];

/// Shape of the true treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateShape {
    /// `τ(x) = exp(x₁) - 3x₂`.
    Heterogeneous,
    /// `τ(x) = c` for every unit.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub cate: CateShape,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            cate: CateShape::Heterogeneous,
        }
    }
}

impl DgpConfig {
    pub fn constant(value: f64) -> Self {
        DgpConfig {
            cate: CateShape::Constant(value),
        }
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        match self.cate {
            CateShape::Heterogeneous => true_cate(x),
            CateShape::Constant(c) => c,
        }
    }
}

/// One simulated sample. `u` and `tau_true` are for diagnostics only; the
/// estimators only ever receive `dataset`.
#[derive(Debug, Clone)]
pub struct DgpDraw {
    pub dataset: Dataset,
    pub u: Vec<f64>,
    pub tau_true: Vec<f64>,
    pub seed: u64,
    pub config: DgpConfig,
}

pub fn true_cate(x: &[f64]) -> f64 {
    x[0].exp() - 3.0 * x[1]
}

fn bx(x: &[f64]) -> f64 {
    B.iter().zip(x).map(|(b, v)| b * v).sum()
}

/// Lower Cholesky factor of [`PROXY_COV`].
fn proxy_cholesky() -> [[f64; 3]; 3] {
    let s = PROXY_COV;
    let l00 = s[0][0].sqrt();
    let l10 = s[1][0] / l00;
    let l11 = (s[1][1] - l10 * l10).sqrt();
    let l20 = s[2][0] / l00;
    let l21 = (s[2][1] - l20 * l10) / l11;
    let l22 = (s[2][2] - l20 * l20 - l21 * l21).sqrt();
    [[l00, 0.0, 0.0], [l10, l11, 0.0], [l20, l21, l22]]
}

/// Draws `n` units. Identical `(n, seed, config)` gives a bit-identical draw.
pub fn generate(n: usize, seed: u64, config: &DgpConfig) -> DgpDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = proxy_cholesky();
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n * D_X);
    let mut z = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut tau_true = Vec::with_capacity(n);
    for _ in 0..n {
        let x: [f64; D_X] = std::array::from_fn(|_| X_SD * rng.sample::<f64, _>(StandardNormal));
        let lin: f64 = PROPENSITY_COEF.iter().zip(&x).map(|(c, v)| c * v).sum();
        let p = 1.0 / (1.0 + lin.exp());
        let ai = u8::from(rng.random::<f64>() < p);
        let af = f64::from(ai);
        let e: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let b = bx(&x);
        let zi = 0.25 + 0.25 * af + b + l[0][0] * e[0];
        let wi = 0.25 + 0.125 * af + b + l[1][0] * e[0] + l[1][1] * e[1];
        let ui = 0.25 + 0.25 * af + b + l[2][0] * e[0] + l[2][1] * e[1] + l[2][2] * e[2];
        let tau = config.tau(&x);
        let ew_given_u = 0.25 + b + 0.5 * (ui - 0.25 - b);
        let mean = 2.0 + tau * af + b + 2.0 * ew_given_u + 2.0 * wi;
        let yi = mean + Y_SD * rng.sample::<f64, _>(StandardNormal);
        y.push(yi);
        a.push(ai);
        xs.extend_from_slice(&x);
        z.push(zi);
        w.push(wi);
        u.push(ui);
        tau_true.push(tau);
    }
    let dataset = Dataset::new(
        y,
        a,
        Mat::from_fn(n, D_X, |i, j| xs[i * D_X + j]),
        Mat::from_fn(n, 1, |i, _| z[i]),
        Mat::from_fn(n, 1, |i, _| w[i]),
    )
    .expect("simulated data is valid by construction");
    DgpDraw {
        dataset,
        u,
        tau_true,
        seed,
        config: *config,
    }
}

/// Closed-form bridge functions of the simulated design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBridges {
    pub config: DgpConfig,
    /// `h*(w, a, x) = h_intercept + τ(x)a + h_bᵀx + h_w w`.
    pub h_intercept: f64,
    pub h_b: [f64; D_X],
    pub h_w: f64,
    /// `q*(z, a, x) = 1 + exp(s_a (q_intercept[a] + q_z z + q_xᵀx))`,
    /// `s_1 = 1`, `s_0 = -1`.
    pub q_intercept: [f64; 2],
    pub q_z: f64,
    pub q_x: [f64; D_X],
}

impl OracleBridges {
    pub fn new(config: DgpConfig) -> Self {
        OracleBridges {
            config,
            h_intercept: 2.0,
            h_b: B,
            h_w: 4.0,
            q_intercept: [0.25, 0.125],
            q_z: -0.5,
            q_x: [0.25, 0.25, 0.0, 0.0, 0.0],
        }
    }

    pub fn h(&self, w: f64, a: u8, x: &[f64]) -> f64 {
        let bx: f64 = self.h_b.iter().zip(x).map(|(b, v)| b * v).sum();
        self.h_intercept + self.config.tau(x) * f64::from(a) + bx + self.h_w * w
    }

    pub fn q(&self, z: f64, a: u8, x: &[f64]) -> f64 {
        let sign = if a == 1 { 1.0 } else { -1.0 };
        let lin = self.q_intercept[usize::from(a)]
            + self.q_z * z
            + self.q_x.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        1.0 + (sign * lin).exp()
    }
}

pub fn oracle_h(w: f64, a: u8, x: &[f64]) -> f64 {
    OracleBridges::new(DgpConfig::default()).h(w, a, x)
}

pub fn oracle_q(z: f64, a: u8, x: &[f64]) -> f64 {
    OracleBridges::new(DgpConfig::default()).q(z, a, x)
}

fn row(data: &Dataset, i: usize) -> Vec<f64> {
    (0..data.d_x()).map(|j| data.x()[(i, j)]).collect()
}

/// Doubly robust scores with the oracle bridges plugged in (no clipping).
pub fn oracle_scores(data: &Dataset, oracle: &OracleBridges) -> Result<ScoreVector> {
    let n = data.n();
    let mut h0 = Vec::with_capacity(n);
    let mut h1 = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for i in 0..n {
        let x = row(data, i);
        let (zi, wi, ai) = (data.z()[(i, 0)], data.w()[(i, 0)], data.a()[i]);
        h0.push(oracle.h(wi, 0, &x));
        h1.push(oracle.h(wi, 1, &x));
        q.push(oracle.q(zi, ai, &x));
    }
    dr_scores(data.y(), data.a(), &h0, &h1, &q, None, vec![0; n])
}

/// Monte Carlo evidence that the oracle bridges solve their equations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certification {
    pub n: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Coefficients of `Y - h*(W, A, X)` regressed on an intercept and the
    /// standardized `(Z, A, X)`.
    pub h_residual_coefficients: Vec<(String, f64)>,
    /// `mean(1{A=a} q*(Z, a, X) g(W, X) - g(W, X))` for each arm and test
    /// function `g`.
    pub q_moment_gaps: Vec<(String, f64)>,
    pub passed: bool,
}

/// Runs the oracle checks on a fresh draw of `n` units.
pub fn certify_oracles(n: usize, seed: u64, config: &DgpConfig, tolerance: f64) -> Result<Certification> {
    let draw = generate(n, seed, config);
    let d = &draw.dataset;
    let oracle = OracleBridges::new(*config);
    let mut resid = Vec::with_capacity(n);
    let mut regressors = Mat::<f64>::zeros(n, 2 + D_X);
    for i in 0..n {
        let x = row(d, i);
        resid.push(d.y()[i] - oracle.h(d.w()[(i, 0)], d.a()[i], &x));
        regressors[(i, 0)] = d.z()[(i, 0)];
        regressors[(i, 1)] = f64::from(d.a()[i]);
        for j in 0..D_X {
            regressors[(i, 2 + j)] = x[j];
        }
    }
    let (scaled, _) = crate::data::standardize(regressors.as_ref())?;
    let mut names = vec!["Z".to_string(), "A".to_string()];
    names.extend((1..=D_X).map(|j| format!("X{j}")));
    let fit = ols(scaled.as_ref(), &resid, &names)?;
    let mut h_residual_coefficients = vec![("(Intercept)".to_string(), fit.coefficients[0])];
    h_residual_coefficients.extend(names.iter().cloned().zip(fit.coefficients[1..].iter().copied()));

    let mut q_moment_gaps = Vec::new();
    for arm in [0u8, 1] {
        for (label, g) in [("1", 0usize), ("W", 1), ("X1", 2)] {
            let mut acc = 0.0;
            for i in 0..n {
                let x = row(d, i);
                let gv = match g {
                    0 => 1.0,
                    1 => d.w()[(i, 0)],
                    _ => x[0],
                };
                let ind = f64::from(u8::from(d.a()[i] == arm));
                acc += ind * oracle.q(d.z()[(i, 0)], arm, &x) * gv - gv;
            }
            q_moment_gaps.push((format!("a={arm}, g={label}"), acc / n as f64));
        }
    }
    let passed = h_residual_coefficients
        .iter()
        .chain(&q_moment_gaps)
        .all(|(_, v)| v.abs() <= tolerance);
    Ok(Certification {
        n,
        seed,
        tolerance,
        h_residual_coefficients,
        q_moment_gaps,
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMethod {
    /// P-learner with cross-fit kernel bridge estimates.
    PlearnerEstimated,
    /// P-learner with the oracle bridges.
    PlearnerOracle,
    /// Kernel-ridge T-learner on `(X, A, Y)` that ignores the proxies.
    NaiveTLearner,
}

impl BenchmarkMethod {
    pub fn label(self) -> &'static str {
        match self {
            BenchmarkMethod::PlearnerEstimated => "plearner_estimated",
            BenchmarkMethod::PlearnerOracle => "plearner_oracle",
            BenchmarkMethod::NaiveTLearner => "naive_tlearner",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub method: BenchmarkMethod,
    pub mse: f64,
    pub bias: f64,
    pub wall_time_sec: f64,
    /// Test-set `(τ̂, τ*)` pairs.
    pub scatter: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub pipeline: PipelineConfig,
    pub dgp: DgpConfig,
    /// Size of the oracle certification draw run before any benchmark.
    pub certification_n: usize,
    pub certification_tolerance: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            pipeline: PipelineConfig::default(),
            dgp: DgpConfig::default(),
            certification_n: 50_000,
            certification_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub n_train: usize,
    pub n_test: usize,
    pub certification: Certification,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn rows_for(&self, method: BenchmarkMethod) -> impl Iterator<Item = &BenchmarkRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// `seed,method,mse,bias,wall_time_sec` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,method,mse,bias,wall_time_sec\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.seed,
                r.method.label(),
                r.mse,
                r.bias,
                r.wall_time_sec
            ));
        }
        s
    }

    /// `seed,method,tau_hat,tau_true` lines for 45-degree-line plots.
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("seed,method,tau_hat,tau_true\n");
        for r in &self.rows {
            for (t_hat, t) in &r.scatter {
                s.push_str(&format!("{},{},{t_hat},{t}\n", r.seed, r.method.label()));
            }
        }
        s
    }
}

fn score_predictions(tau_hat: &[f64], tau: &[f64]) -> (f64, f64) {
    let n = tau.len() as f64;
    let mse = tau_hat.iter().zip(tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let bias = tau_hat.iter().zip(tau).map(|(a, b)| a - b).sum::<f64>() / n;
    (mse, bias)
}

fn run_seed(n_train: usize, n_test: usize, seed: u64, config: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let train = generate(n_train, derive_seed(seed, "bench/train"), &config.dgp);
    let test = generate(n_test, derive_seed(seed, "bench/test"), &config.dgp);
    let x_test = test.dataset.x();
    let mut rows = Vec::with_capacity(3);
    let mut push = |method, tau_hat: Vec<f64>, started: Instant| {
        let (mse, bias) = score_predictions(&tau_hat, &test.tau_true);
        rows.push(BenchmarkRow {
            seed,
            method,
            mse,
            bias,
            wall_time_sec: started.elapsed().as_secs_f64(),
            scatter: tau_hat.into_iter().zip(test.tau_true.iter().copied()).collect(),
        });
    };

    let started = Instant::now();
    let fitted = fit_plearner(&train.dataset, &config.pipeline, derive_seed(seed, "bench/plearner"))?;
    push(BenchmarkMethod::PlearnerEstimated, fitted.model.predict(x_test)?, started);

    let started = Instant::now();
    let oracle = OracleBridges::new(config.dgp);
    let scores = oracle_scores(&train.dataset, &oracle)?;
    let model = config
        .pipeline
        .fit_final_stage(&train.dataset, &scores, derive_seed(seed, "bench/oracle"))?;
    push(BenchmarkMethod::PlearnerOracle, model.predict(x_test)?, started);

    let started = Instant::now();
    let tau_naive = naive_t_learner(&train.dataset, x_test, &config.pipeline, derive_seed(seed, "bench/naive"))?;
    push(BenchmarkMethod::NaiveTLearner, tau_naive, started);
    Ok(rows)
}

/// Kernel-ridge T-learner: separate regressions of `Y` on `X` per arm.
pub fn naive_t_learner(
    train: &Dataset,
    x_new: faer::MatRef<'_, f64>,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    train.require_both_arms()?;
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        let idx: Vec<usize> = (0..train.n()).filter(|&i| train.a()[i] == arm).collect();
        let arm_data = train.subset(&idx)?;
        let model: CateModel = fit_kernel_ridge(
            arm_data.x(),
            arm_data.y(),
            &config.cate_lambda_grid,
            config.cate_splits.min(idx.len()),
            derive_seed(seed, if arm == 0 { "naive/0" } else { "naive/1" }),
        )?;
        preds.push(model.predict(x_new)?);
    }
    Ok(preds[1].iter().zip(&preds[0]).map(|(a, b)| a - b).collect())
}

/// Test-set MSE of the estimated-nuisance P-learner, the oracle-nuisance
/// P-learner and the naive T-learner for every seed.
///
/// Aborts before any fitting if the oracle certification fails.
pub fn benchmark_mse(n_train: usize, n_test: usize, seeds: &[u64], config: &BenchmarkConfig) -> Result<BenchmarkTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one seed".into()));
    }
    let certification = certify_oracles(
        config.certification_n,
        derive_seed(seeds[0], "bench/certify"),
        &config.dgp,
        config.certification_tolerance,
    )?;
    if !certification.passed {
        return Err(Error::Certification(format!(
            "h residual coefficients {:?}, q moment gaps {:?}",
            certification.h_residual_coefficients, certification.q_moment_gaps
        )));
    }
    let per_seed: Vec<Result<Vec<BenchmarkRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            run_seed(n_train, n_test, seed, config).map_err(|e| Error::Seed {
                seed,
                source: Box::new(e),
            })
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(BenchmarkTable {
        n_train,
        n_test,
        certification,
        rows,
    })
}
