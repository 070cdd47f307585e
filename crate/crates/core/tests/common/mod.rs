//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use plearner::bridge::{BridgeKind, BridgeModel, BridgeParams, BridgeProblem};
use plearner::data::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss_gram(points: &[Vec<f64>], bandwidth: f64) -> Mat<f64> {
    let n = points.len();
    Mat::from_fn(n, n, |i, j| {
        let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    })
}

/// `U S^{1/2}` of a symmetric PSD matrix, negative eigenvalues clamped.
fn half_factor(k: &Mat<f64>) -> (Mat<f64>, Vec<f64>) {
    let e = k.self_adjoint_eigen(Side::Lower).expect("eigendecomposition");
    let n = k.nrows();
    let s: Vec<f64> = (0..n).map(|i| e.S()[i].max(0.0)).collect();
    let u = e.U();
    (Mat::from_fn(n, n, |i, j| u[(i, j)] * s[j].sqrt()), s)
}

/// Inputs of the bridge game written out from first principles.
pub struct Game {
    pub n: usize,
    pub k_primal: Mat<f64>,
    pub k_critic: Mat<f64>,
    pub selector: Vec<f64>,
    pub target: Vec<f64>,
    pub lambda_primal: f64,
    pub lambda_critic: f64,
}

impl Game {
    /// Builds the game directly from raw data: Gram matrices over the
    /// published standardized features and bandwidths of `problem`, and the
    /// moment pieces from the kind's definition.
    pub fn new(data: &Dataset, problem: &BridgeProblem, params: &BridgeParams) -> Game {
        let n = data.n();
        let rows = |m: &Mat<f64>| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect::<Vec<Vec<f64>>>();
        let k_primal = gauss_gram(&rows(&problem.primal), problem.primal_median * params.primal_bandwidth_multiplier);
        let k_critic = gauss_gram(
            &rows(&problem.adversary),
            problem.adversary_median * params.adversary_bandwidth_multiplier,
        );
        let a = data.a();
        let y = data.y();
        let (selector, target): (Vec<f64>, Vec<f64>) = match problem.kind {
            BridgeKind::H => (0..n)
                .map(|i| {
                    let d = f64::from(u8::from(a[i] == problem.arm));
                    (d, d * y[i])
                })
                .unzip(),
            BridgeKind::Q => (0..n).map(|i| (f64::from(u8::from(a[i] == problem.arm)), 1.0)).unzip(),
            BridgeKind::HCatt => (0..n)
                .map(|i| {
                    let d = f64::from(u8::from(a[i] == 0));
                    (d, d * y[i])
                })
                .unzip(),
            BridgeKind::QCatt => (0..n).map(|i| (f64::from(u8::from(a[i] == 0)), f64::from(a[i]))).unzip(),
        };
        Game {
            n,
            k_primal,
            k_critic,
            selector,
            target,
            lambda_primal: params.lambda_primal,
            lambda_critic: params.lambda_adversary,
        }
    }

    fn residual(&self, f: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.target[i] - self.selector[i] * f[i]).collect()
    }

    /// `P_n[m g - g²] - λ_c |g|²_RKHS` maximized over critics `g = C γ`,
    /// `C = U S^{1/2}` of the critic Gram matrix, where the problem is
    /// diagonal in `γ`.
    pub fn inner_max(&self, m: &[f64]) -> f64 {
        let n = self.n as f64;
        let (c, s) = half_factor(&self.k_critic);
        let mut value = 0.0;
        for k in 0..self.n {
            let b: f64 = (0..self.n).map(|i| c[(i, k)] * m[i]).sum::<f64>() / n;
            let curvature = s[k] / n + self.lambda_critic;
            // max_γ b γ - curvature γ²
            value += b * b / (4.0 * curvature);
        }
        value
    }

    /// Outer objective at representer weights `alpha` over the primal Gram.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let f: Vec<f64> = (0..self.n)
            .map(|i| (0..self.n).map(|j| self.k_primal[(i, j)] * alpha[j]).sum())
            .collect();
        let penalty: f64 = (0..self.n).map(|i| alpha[i] * f[i]).sum();
        self.inner_max(&self.residual(&f)) + self.lambda_primal * penalty
    }

    /// Saddle value from the joint first-order conditions of the game in
    /// whitened coordinates `f = P δ`, `g = C γ` (|δ|², |γ|² are the RKHS
    /// norms), solved as one symmetric indefinite system by pivoted LU.
    pub fn saddle_value(&self) -> f64 {
        let n = self.n;
        let nf = n as f64;
        let (p, _) = half_factor(&self.k_primal);
        let (c, s) = half_factor(&self.k_critic);
        // M = (1/n) Pᵀ D C
        let m = Mat::from_fn(n, n, |a, b| (0..n).map(|i| p[(i, a)] * self.selector[i] * c[(i, b)]).sum::<f64>() / nf);
        let mut sys = Mat::<f64>::zeros(2 * n, 2 * n);
        let mut rhs = Mat::<f64>::zeros(2 * n, 1);
        for a in 0..n {
            sys[(a, a)] = 2.0 * self.lambda_primal;
            sys[(n + a, n + a)] = -(2.0 * s[a] / nf + 2.0 * self.lambda_critic);
            for b in 0..n {
                sys[(a, n + b)] = -m[(a, b)];
                sys[(n + b, a)] = -m[(a, b)];
            }
            rhs[(n + a, 0)] = -(0..n).map(|i| c[(i, a)] * self.target[i]).sum::<f64>() / nf;
        }
        let sol = sys.full_piv_lu().solve(&rhs);
        let delta: Vec<f64> = (0..n).map(|a| sol[(a, 0)]).collect();
        let f: Vec<f64> = (0..n).map(|i| (0..n).map(|a| p[(i, a)] * delta[a]).sum()).collect();
        let penalty: f64 = delta.iter().map(|d| d * d).sum();
        self.inner_max(&self.residual(&f)) + self.lambda_primal * penalty
    }
}

/// Closed-form value, oracle value and the minimum of
/// `objective(α + t v) - objective(α)` over random directions.
pub struct SaddleCheck {
    pub closed_form: f64,
    pub oracle: f64,
    pub min_perturbation_gain: f64,
}

pub fn saddle_check(data: &Dataset, kind: BridgeKind, arm: u8, params: &BridgeParams, seed: u64) -> SaddleCheck {
    let problem = BridgeProblem::new(data, kind, arm).expect("problem");
    let model: BridgeModel = problem.fit(params).expect("fit");
    let game = Game::new(data, &problem, params);
    let closed_form = game.objective(&model.alpha);
    let oracle = game.saddle_value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = model.alpha.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-3) * 1e-2;
    let mut min_gain = f64::INFINITY;
    for _ in 0..10 {
        let pert: Vec<f64> = model.alpha.iter().map(|a| a + scale * (rng.random::<f64>() - 0.5)).collect();
        min_gain = min_gain.min(game.objective(&pert) - closed_form);
    }
    SaddleCheck {
        closed_form,
        oracle,
        min_perturbation_gain: min_gain,
    }
}

/// Random small instance with both arms represented at least twice.
pub fn random_instance(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(12..=30);
    loop {
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let treated = a.iter().filter(|&&v| v == 1).count();
        if treated < 2 || n - treated < 2 {
            continue;
        }
        let x = Mat::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let z = Mat::from_fn(n, 1, |i, _| x[(i, 0)] + rng.random::<f64>());
        let w = Mat::from_fn(n, 1, |i, _| x[(i, 1)] - rng.random::<f64>());
        let y = (0..n).map(|i| f64::from(a[i]) + w[(i, 0)] + rng.random::<f64>()).collect();
        return Dataset::new(y, a, x, z, w).expect("valid instance");
    }
}

/// HC3 standard errors by looping over units with explicit `(XᵀX)⁻¹`
/// from a pseudo-inverse of the normal equations.
pub fn brute_force_hc3(x: &Mat<f64>, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let design = Mat::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let xtx = design.transpose() * &design;
    let svd = xtx.svd().expect("svd");
    let s = svd.S().column_vector();
    let inv_s = Mat::from_fn(p, p, |i, j| if i == j && s[i] > 1e-14 * s[0] { 1.0 / s[i] } else { 0.0 });
    let xtx_inv = svd.V() * &inv_s * svd.U().transpose();
    let xty = design.transpose() * Mat::from_fn(n, 1, |i, _| y[i]);
    let beta = &xtx_inv * &xty;
    let mut meat = Mat::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = Mat::from_fn(p, 1, |j, _| design[(i, j)]);
        let h = (xi.transpose() * &xtx_inv * &xi)[(0, 0)];
        let e = y[i] - (0..p).map(|j| design[(i, j)] * beta[(j, 0)]).sum::<f64>();
        let w = e * e / ((1.0 - h) * (1.0 - h));
        meat += &xi * xi.transpose() * faer::Scale(w);
    }
    let v = &xtx_inv * &meat * &xtx_inv;
    ((0..p).map(|j| beta[(j, 0)]).collect(), (0..p).map(|j| v[(j, j)].sqrt()).collect())
}

/// Rows of `(Z, X)` for every unit.
pub fn treatment_proxy_rows(data: &Dataset) -> Vec<Vec<f64>> {
    let (z, x) = (data.z(), data.x());
    (0..data.n())
        .map(|i| (0..z.ncols()).map(|j| z[(i, j)]).chain((0..x.ncols()).map(|j| x[(i, j)])).collect())
        .collect()
}

/// `(1/(4n²)) mᵀ K (K/n + λI)⁻¹ m` for each residual `m`, with a Gaussian
/// critic over column-standardized `points` at the median pairwise distance.
pub fn critic_values(points: &[Vec<f64>], lambda: f64, residuals: &[&[f64]]) -> Vec<f64> {
    let n = points.len();
    let d = points[0].len();
    let mut std_points = points.to_vec();
    for j in 0..d {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
        let sd = (points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        for p in &mut std_points {
            p[j] = (p[j] - mean) / if sd > 0.0 { sd } else { 1.0 };
        }
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for k in i + 1..n {
            dists.push(std_points[i].iter().zip(&std_points[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    let k = gauss_gram(&std_points, median);
    let nf = n as f64;
    let a = Mat::from_fn(n, n, |i, j| k[(i, j)] / nf + if i == j { lambda } else { 0.0 });
    let chol = a.llt(Side::Lower).expect("positive definite");
    residuals
        .iter()
        .map(|m| {
            let col = Mat::from_fn(n, 1, |i, _| m[i]);
            let kv = &k * chol.solve(&col);
            (0..n).map(|i| m[i] * kv[(i, 0)]).sum::<f64>() / (4.0 * nf * nf)
        })
        .collect()
}
