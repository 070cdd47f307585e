//! Kernel min-max estimation of the confounding bridge functions.
//!
//! Every bridge solves a conditional moment restriction of the form
//! `E[(t - d * f(V)) * g(C)] = 0` for all critics `g`, where `f` is the bridge
//! evaluated on its primal inputs `V`, `g` ranges over an RKHS on the critic
//! inputs `C`, `d` selects the units the restriction applies to and `t` is the
//! target:
//!
//! | kind     | primal `V` | critic `C` | `d`          | `t`             |
//! |----------|------------|------------|--------------|-----------------|
//! | `H`      | `(W, X)`   | `(Z, X)`   | `1{A = a}`   | `1{A = a} * Y`  |
//! | `Q`      | `(Z, X)`   | `(W, X)`   | `1{A = a}`   | `1`             |
//! | `HCatt`  | `(W, X)`   | `(Z, X)`   | `1{A = 0}`   | `1{A = 0} * Y`  |
//! | `QCatt`  | `(Z, X)`   | `(W, X)`   | `1{A = 0}`   | `1{A = 1}`      |
//!
//! With representer expansions `f = K α` (anchored at all training rows) and
//! `g = K_c β`, the regularized game
//!
//! ```text
//! min_α max_β  (1/n) mᵀ K_c β - (1/n) |K_c β|² - λ_c βᵀ K_c β + λ_p αᵀ K α,
//! m = t - D K α
//! ```
//!
//! has a concave quadratic inner problem. Its maximizer
//! `β* = (1/(2n)) (K_c/n + λ_c I)⁻¹ m` gives the value `mᵀ Ω m` with
//! `Ω = (1/(4n²)) K_c (K_c/n + λ_c I)⁻¹`, so the outer problem reduces to
//! `min_α mᵀ Ω m + λ_p αᵀ K α`, whose normal equations are
//!
//! ```text
//! (K D Ω D K + λ_p K + ε I) α = K D Ω t.
//! ```

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, Dataset, FeatureSet, Standardizer};
use crate::error::{Error, Result};
use crate::kernels::{gram, median_heuristic, self_gram, KernelSpec};
use crate::linalg::{
    add_diagonal, column, dot, matvec, select_columns, solve_spd, sym_eigen, symmetrize, to_vec,
    JITTER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BridgeKind {
    /// Outcome bridge `h(w, a, x)` for a fixed arm.
    H,
    /// Treatment bridge `q(z, a, x)` for a fixed arm.
    Q,
    /// Outcome bridge `h(w, x)` on the control arm, for effects on the treated.
    HCatt,
    /// Treatment bridge `q(z, x)` targeting the odds `f(A=1|W,X) / f(A=0|W,X)`.
    QCatt,
}

impl BridgeKind {
    pub fn primal_features(self) -> FeatureSet {
        match self {
            BridgeKind::H | BridgeKind::HCatt => FeatureSet::OutcomeProxies,
            BridgeKind::Q | BridgeKind::QCatt => FeatureSet::TreatmentProxies,
        }
    }

    pub fn adversary_features(self) -> FeatureSet {
        match self {
            BridgeKind::H | BridgeKind::HCatt => FeatureSet::TreatmentProxies,
            BridgeKind::Q | BridgeKind::QCatt => FeatureSet::OutcomeProxies,
        }
    }

    pub fn is_catt(self) -> bool {
        matches!(self, BridgeKind::HCatt | BridgeKind::QCatt)
    }

    /// The arm whose units enter the moment through `D`.
    fn selected_arm(self, arm: u8) -> u8 {
        if self.is_catt() {
            0
        } else {
            arm
        }
    }

    /// Diagonal of `D`.
    pub fn selector(self, data: &Dataset, arm: u8) -> Vec<f64> {
        let sel = self.selected_arm(arm);
        data.a().iter().map(|&a| f64::from(u8::from(a == sel))).collect()
    }

    /// Moment target `t`.
    pub fn target(self, data: &Dataset, arm: u8) -> Vec<f64> {
        let d = self.selector(data, arm);
        match self {
            BridgeKind::H | BridgeKind::HCatt => d.iter().zip(data.y()).map(|(d, y)| d * y).collect(),
            BridgeKind::Q => vec![1.0; data.n()],
            BridgeKind::QCatt => data.a().iter().map(|&a| f64::from(a)).collect(),
        }
    }

    /// Moment residual `t - D f` for bridge values `f` on `data`.
    pub fn residual(self, data: &Dataset, arm: u8, fitted: &[f64]) -> Vec<f64> {
        let d = self.selector(data, arm);
        let t = self.target(data, arm);
        (0..data.n()).map(|i| t[i] - d[i] * fitted[i]).collect()
    }
}

/// Fixed hyperparameters of one bridge fit. Bandwidths are multipliers of the
/// median heuristic computed on the standardized training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    pub lambda_primal: f64,
    pub lambda_adversary: f64,
    pub primal_bandwidth_multiplier: f64,
    pub adversary_bandwidth_multiplier: f64,
}

impl Default for BridgeParams {
    fn default() -> Self {
        BridgeParams {
            lambda_primal: 1e-6,
            lambda_adversary: 1e-1,
            primal_bandwidth_multiplier: 1.0,
            adversary_bandwidth_multiplier: 1.0,
        }
    }
}

impl BridgeParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_primal", self.lambda_primal),
            ("lambda_adversary", self.lambda_adversary),
            ("primal_bandwidth_multiplier", self.primal_bandwidth_multiplier),
            ("adversary_bandwidth_multiplier", self.adversary_bandwidth_multiplier),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Hyperparameter grid searched by [`select_hyper`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeHyper {
    pub lambda_primal_grid: Vec<f64>,
    pub lambda_adversary_grid: Vec<f64>,
    pub primal_bandwidth_multipliers: Vec<f64>,
    pub adversary_bandwidth_multipliers: Vec<f64>,
    /// Ridge of the fixed reference critic used to score held-out moment
    /// violation. Shared by all candidates so their scores are comparable.
    pub validation_lambda: f64,
}

impl Default for BridgeHyper {
    fn default() -> Self {
        BridgeHyper {
            lambda_primal_grid: vec![1e-7, 1e-6, 1e-5, 1e-4],
            lambda_adversary_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            primal_bandwidth_multipliers: vec![0.5, 1.0, 2.0],
            adversary_bandwidth_multipliers: vec![0.5, 1.0, 2.0],
            validation_lambda: 1e-2,
        }
    }
}

impl BridgeHyper {
    /// Grid with a single candidate.
    pub fn fixed(p: BridgeParams) -> Self {
        BridgeHyper {
            lambda_primal_grid: vec![p.lambda_primal],
            lambda_adversary_grid: vec![p.lambda_adversary],
            primal_bandwidth_multipliers: vec![p.primal_bandwidth_multiplier],
            adversary_bandwidth_multipliers: vec![p.adversary_bandwidth_multiplier],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("lambda_primal_grid", &self.lambda_primal_grid),
            ("lambda_adversary_grid", &self.lambda_adversary_grid),
            ("primal_bandwidth_multipliers", &self.primal_bandwidth_multipliers),
            ("adversary_bandwidth_multipliers", &self.adversary_bandwidth_multipliers),
        ] {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} is empty")));
            }
            if let Some(v) = g.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} contains non-positive {v}")));
            }
        }
        if !(self.validation_lambda > 0.0) {
            return Err(Error::InvalidArgument("validation_lambda must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda_primal_grid.len()
            * self.lambda_adversary_grid.len()
            * self.primal_bandwidth_multipliers.len()
            * self.adversary_bandwidth_multipliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn candidates(&self) -> Vec<BridgeParams> {
        let mut out = Vec::with_capacity(self.len());
        for &pm in &self.primal_bandwidth_multipliers {
            for &am in &self.adversary_bandwidth_multipliers {
                for &la in &self.lambda_adversary_grid {
                    for &lp in &self.lambda_primal_grid {
                        out.push(BridgeParams {
                            lambda_primal: lp,
                            lambda_adversary: la,
                            primal_bandwidth_multiplier: pm,
                            adversary_bandwidth_multiplier: am,
                        });
                    }
                }
            }
        }
        out
    }
}

/// A fitted bridge function `f(v) = Σ_j alpha_j k(v, anchor_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeModel {
    pub kind: BridgeKind,
    /// Treatment arm for `H`/`Q`; `None` for the CATT kinds.
    pub arm: Option<u8>,
    pub params: BridgeParams,
    pub alpha: Vec<f64>,
    /// Standardized primal features of the training rows.
    pub anchors: Vec<Vec<f64>>,
    /// Kernel of the bridge; `feature_columns` index the `[x | z | w]` design.
    pub primal_spec: KernelSpec,
    /// Kernel of the critic class; `feature_columns` index the design.
    pub adversary_spec: KernelSpec,
    pub lambda_primal: f64,
    pub lambda_adversary: f64,
    /// Fitted on the training design `[x | z | w]`.
    pub standardizer: Standardizer,
    pub dims: (usize, usize, usize),
}

impl BridgeModel {
    fn arm_or_zero(&self) -> u8 {
        self.arm.unwrap_or(0)
    }

    fn standardized_design(&self, data: &Dataset) -> Result<Mat<f64>> {
        let dims = (data.d_x(), data.d_z(), data.d_w());
        if dims != self.dims {
            return Err(Error::DimensionMismatch(format!(
                "model fitted on (d_x, d_z, d_w) = {:?}, data has {dims:?}",
                self.dims
            )));
        }
        self.standardizer.transform(data.design().as_ref())
    }

    /// Bridge values at every unit of `data`.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let design = self.standardized_design(data)?;
        let points = select_columns(design.as_ref(), &self.primal_spec.feature_columns);
        let anchors = Mat::from_fn(self.anchors.len(), points.ncols(), |i, j| self.anchors[i][j]);
        let spec = KernelSpec::all_columns(self.primal_spec.bandwidth, points.ncols())?;
        let k = gram(points.as_ref(), anchors.as_ref(), &spec)?;
        Ok(matvec(k.as_ref(), &self.alpha))
    }

    /// Moment residual `t - D f` of the fitted bridge on `data`.
    pub fn moment_residual(&self, data: &Dataset) -> Result<Vec<f64>> {
        let f = self.predict(data)?;
        Ok(self.kind.residual(data, self.arm_or_zero(), &f))
    }

    /// RKHS norm `sqrt(αᵀ K α)` of the fitted bridge.
    pub fn rkhs_norm(&self) -> Result<f64> {
        let anchors = Mat::from_fn(self.anchors.len(), self.anchors.first().map_or(0, Vec::len), |i, j| {
            self.anchors[i][j]
        });
        let spec = KernelSpec::all_columns(self.primal_spec.bandwidth, anchors.ncols())?;
        let k = self_gram(anchors.as_ref(), &spec)?;
        Ok(dot(&self.alpha, &matvec(k.as_ref(), &self.alpha)).max(0.0).sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Adversarial value `(1/(4n²)) mᵀ K_c (K_c/n + λ I)⁻¹ m` of a residual
/// against the RKHS critic with Gram matrix `K_c` over `points`.
pub fn adversarial_value(
    residual: &[f64],
    points: MatRef<'_, f64>,
    spec: &KernelSpec,
    lambda: f64,
) -> Result<f64> {
    let n = residual.len();
    if n == 0 || points.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "residual has {n} entries, critic points {}",
            points.nrows()
        )));
    }
    if residual.iter().all(|&r| r == 0.0) {
        return Ok(0.0);
    }
    let k = self_gram(points, spec)?;
    let nf = n as f64;
    let mut a = Mat::from_fn(n, n, |i, j| k[(i, j)] / nf);
    add_diagonal(&mut a, lambda);
    let v = solve_spd(a.as_ref(), column(residual).as_ref())?;
    let kv = matvec(k.as_ref(), &to_vec(v.as_ref()));
    Ok((dot(residual, &kv) / (4.0 * nf * nf)).max(0.0))
}

/// Adversarial moment violation of a fitted bridge on `data`, using the
/// model's own critic bandwidth and ridge.
pub fn moment_violation(model: &BridgeModel, data: &Dataset) -> Result<f64> {
    let design = model.standardized_design(data)?;
    let m = model.kind.residual(data, model.arm_or_zero(), &model.predict(data)?);
    adversarial_value(&m, design.as_ref(), &model.adversary_spec, model.lambda_adversary)
}

/// Standardized features and moment data of one bridge problem.
pub struct BridgeProblem {
    pub kind: BridgeKind,
    pub arm: u8,
    pub standardizer: Standardizer,
    pub primal_columns: Vec<usize>,
    pub adversary_columns: Vec<usize>,
    /// Standardized primal inputs, `n × d_primal`.
    pub primal: Mat<f64>,
    /// Standardized critic inputs, `n × d_adversary`.
    pub adversary: Mat<f64>,
    pub primal_median: f64,
    pub adversary_median: f64,
    pub selector: Vec<f64>,
    pub target: Vec<f64>,
    dims: (usize, usize, usize),
}

impl BridgeProblem {
    pub fn new(train: &Dataset, kind: BridgeKind, arm: u8) -> Result<Self> {
        if arm > 1 {
            return Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {arm}")));
        }
        let needed = kind.selected_arm(arm);
        let count = train.arm_count(needed);
        if count == 0 {
            return Err(Error::EmptyArm { arm: needed });
        }
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "bridge {kind:?} needs at least 2 units with A = {needed}, got {count}"
            )));
        }
        let standardizer = Standardizer::fit(train.design().as_ref())?;
        let design = standardizer.transform(train.design().as_ref())?;
        let primal_columns = train.feature_columns(kind.primal_features());
        let adversary_columns = train.feature_columns(kind.adversary_features());
        let primal = select_columns(design.as_ref(), &primal_columns);
        let adversary = select_columns(design.as_ref(), &adversary_columns);
        Ok(BridgeProblem {
            kind,
            arm,
            primal_median: median_heuristic(primal.as_ref())?,
            adversary_median: median_heuristic(adversary.as_ref())?,
            selector: kind.selector(train, arm),
            target: kind.target(train, arm),
            standardizer,
            primal_columns,
            adversary_columns,
            primal,
            adversary,
            dims: (train.d_x(), train.d_z(), train.d_w()),
        })
    }

    pub fn n(&self) -> usize {
        self.target.len()
    }

    pub fn primal_spec(&self, multiplier: f64) -> Result<KernelSpec> {
        KernelSpec::all_columns(self.primal_median * multiplier, self.primal.ncols())
    }

    pub fn adversary_spec(&self, multiplier: f64) -> Result<KernelSpec> {
        KernelSpec::all_columns(self.adversary_median * multiplier, self.adversary.ncols())
    }

    /// `Ω = (1/(4n²)) K_c (K_c/n + λ I)⁻¹`, symmetrized.
    pub fn omega(k_adv: MatRef<'_, f64>, lambda: f64) -> Result<Mat<f64>> {
        let n = k_adv.nrows();
        let nf = n as f64;
        let mut a = Mat::from_fn(n, n, |i, j| k_adv[(i, j)] / nf);
        add_diagonal(&mut a, lambda);
        // K_c and (K_c/n + λI) commute, so the solve gives the same product.
        let mut omega = solve_spd(a.as_ref(), k_adv)?;
        let scale = 1.0 / (4.0 * nf * nf);
        for j in 0..n {
            for i in 0..n {
                omega[(i, j)] *= scale;
            }
        }
        Ok(symmetrize(omega.as_ref()))
    }

    /// Closed-form representer weights for fixed Gram matrices.
    pub fn solve_alpha(&self, k_primal: MatRef<'_, f64>, omega: MatRef<'_, f64>, lambda_primal: f64) -> Result<Vec<f64>> {
        let n = self.n();
        // D K: rows scaled by the selector.
        let dk = Mat::from_fn(n, n, |i, j| self.selector[i] * k_primal[(i, j)]);
        let omega_dk = omega * &dk;
        let m = dk.transpose() * &omega_dk;
        let mut system = Mat::from_fn(n, n, |i, j| m[(i, j)] + lambda_primal * k_primal[(i, j)]);
        system = symmetrize(system.as_ref());
        add_diagonal(&mut system, JITTER);
        let omega_t = matvec(omega, &self.target);
        let rhs = matvec(dk.transpose(), &omega_t);
        let alpha = solve_spd(system.as_ref(), column(&rhs).as_ref())?;
        let alpha = to_vec(alpha.as_ref());
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("bridge solve produced non-finite weights".into()));
        }
        Ok(alpha)
    }

    /// Fits the bridge by the closed-form saddle-point solution.
    pub fn fit(&self, params: &BridgeParams) -> Result<BridgeModel> {
        params.validate()?;
        let pspec = self.primal_spec(params.primal_bandwidth_multiplier)?;
        let aspec = self.adversary_spec(params.adversary_bandwidth_multiplier)?;
        let kp = self_gram(self.primal.as_ref(), &pspec)?;
        let ka = self_gram(self.adversary.as_ref(), &aspec)?;
        let omega = Self::omega(ka.as_ref(), params.lambda_adversary)?;
        let alpha = self.solve_alpha(kp.as_ref(), omega.as_ref(), params.lambda_primal)?;
        Ok(BridgeModel {
            kind: self.kind,
            arm: if self.kind.is_catt() { None } else { Some(self.arm) },
            params: *params,
            alpha,
            anchors: crate::linalg::to_rows(self.primal.as_ref()),
            primal_spec: KernelSpec::new(pspec.bandwidth, self.primal_columns.clone())?,
            adversary_spec: KernelSpec::new(aspec.bandwidth, self.adversary_columns.clone())?,
            lambda_primal: params.lambda_primal,
            lambda_adversary: params.lambda_adversary,
            standardizer: self.standardizer.clone(),
            dims: self.dims,
        })
    }
}

/// Outcome bridge for arm `arm`.
pub fn fit_h(train: &Dataset, arm: u8, params: &BridgeParams) -> Result<BridgeModel> {
    BridgeProblem::new(train, BridgeKind::H, arm)?.fit(params)
}

/// Treatment bridge for arm `arm`.
pub fn fit_q(train: &Dataset, arm: u8, params: &BridgeParams) -> Result<BridgeModel> {
    BridgeProblem::new(train, BridgeKind::Q, arm)?.fit(params)
}

/// Control-arm outcome bridge `h(w, x)` for effects on the treated.
pub fn fit_h_catt(train: &Dataset, params: &BridgeParams) -> Result<BridgeModel> {
    BridgeProblem::new(train, BridgeKind::HCatt, 0)?.fit(params)
}

/// Odds bridge `q(z, x)` for effects on the treated.
pub fn fit_q_catt(train: &Dataset, params: &BridgeParams) -> Result<BridgeModel> {
    BridgeProblem::new(train, BridgeKind::QCatt, 0)?.fit(params)
}

pub fn fit_bridge(train: &Dataset, kind: BridgeKind, arm: u8, params: &BridgeParams) -> Result<BridgeModel> {
    BridgeProblem::new(train, kind, arm)?.fit(params)
}

/// Outcome of a grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSelection {
    pub chosen: BridgeParams,
    /// Mean held-out violation per candidate, in grid order. Empty when the
    /// grid has a single candidate.
    pub scores: Vec<(BridgeParams, f64)>,
}

/// Precomputed spectral pieces for solving many grid points on one split.
struct SpectralSplit<'a> {
    problem: &'a BridgeProblem,
    val_target: Vec<f64>,
    val_selector: Vec<f64>,
    val_primal: Mat<f64>,
    /// `(1/(4n²)) K_v (K_v/n + λ_ref I)⁻¹` on the validation critic inputs.
    val_operator: Mat<f64>,
}

impl<'a> SpectralSplit<'a> {
    fn new(problem: &'a BridgeProblem, val: &Dataset, validation_lambda: f64) -> Result<Self> {
        let design = problem.standardizer.transform(val.design().as_ref())?;
        let val_primal = select_columns(design.as_ref(), &problem.primal_columns);
        let val_adv = select_columns(design.as_ref(), &problem.adversary_columns);
        let spec = KernelSpec::all_columns(median_heuristic(val_adv.as_ref())?, val_adv.ncols())?;
        let kv = self_gram(val_adv.as_ref(), &spec)?;
        let val_operator = BridgeProblem::omega(kv.as_ref(), validation_lambda)?;
        Ok(SpectralSplit {
            problem,
            val_target: problem.kind.target(val, problem.arm),
            val_selector: problem.kind.selector(val, problem.arm),
            val_primal,
            val_operator,
        })
    }

    /// Held-out violation for every candidate of the grid, in grid order.
    fn score_grid(&self, hyper: &BridgeHyper) -> Result<Vec<f64>> {
        let p = self.problem;
        let n = p.n();
        let nf = n as f64;
        let mut out = Vec::with_capacity(hyper.len());
        let adv_eigen = hyper
            .adversary_bandwidth_multipliers
            .iter()
            .map(|&am| {
                let ka = self_gram(p.adversary.as_ref(), &p.adversary_spec(am)?)?;
                sym_eigen(ka.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        for &pm in &hyper.primal_bandwidth_multipliers {
            let pspec = p.primal_spec(pm)?;
            let kp = self_gram(p.primal.as_ref(), &pspec)?;
            let kvp = gram(self.val_primal.as_ref(), p.primal.as_ref(), &pspec)?;
            let dk = Mat::from_fn(n, n, |i, j| p.selector[i] * kp[(i, j)]);
            for eig in &adv_eigen {
                // B = Vᵀ D K, so that K D Ω D K = Bᵀ diag(ω) B.
                let b = eig.vectors.transpose() * &dk;
                let vt_t = matvec(eig.vectors.transpose(), &p.target);
                for &la in &hyper.lambda_adversary_grid {
                    let omega: Vec<f64> = eig
                        .values
                        .iter()
                        .map(|&s| {
                            let s = s.max(0.0);
                            s / (4.0 * nf * nf * (s / nf + la))
                        })
                        .collect();
                    let c = Mat::from_fn(n, n, |i, j| omega[i].sqrt() * b[(i, j)]);
                    let m = c.transpose() * &c;
                    let w: Vec<f64> = omega.iter().zip(&vt_t).map(|(o, v)| o * v).collect();
                    let rhs = matvec(b.transpose(), &w);
                    for &lp in &hyper.lambda_primal_grid {
                        let mut system =
                            Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]) + lp * kp[(i, j)]);
                        add_diagonal(&mut system, JITTER);
                        let score = solve_spd(system.as_ref(), column(&rhs).as_ref())
                            .ok()
                            .map(|alpha| {
                                let pred = matvec(kvp.as_ref(), &to_vec(alpha.as_ref()));
                                let resid: Vec<f64> = (0..pred.len())
                                    .map(|i| self.val_target[i] - self.val_selector[i] * pred[i])
                                    .collect();
                                dot(&resid, &matvec(self.val_operator.as_ref(), &resid))
                            })
                            .filter(|s| s.is_finite())
                            .unwrap_or(f64::INFINITY);
                        out.push(score);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Chooses bridge hyperparameters by `n_splits`-fold cross-validation of the
/// held-out moment violation against a fixed reference critic.
///
/// Ties go to the larger `lambda_primal`.
pub fn select_hyper(
    train: &Dataset,
    kind: BridgeKind,
    arm: u8,
    grids: &BridgeHyper,
    n_splits: usize,
    seed: u64,
) -> Result<HyperSelection> {
    grids.validate()?;
    let candidates = grids.candidates();
    if candidates.len() == 1 {
        return Ok(HyperSelection {
            chosen: candidates[0],
            scores: Vec::new(),
        });
    }
    if n_splits < 2 {
        return Err(Error::InvalidArgument(format!("n_splits must be >= 2, got {n_splits}")));
    }
    let folds = assign_folds(train.n(), n_splits, seed)?;
    let mut totals = vec![0.0; candidates.len()];
    for split in 0..n_splits {
        let tr = train.subset(&folds.complement(split))?;
        let val = train.subset(&folds.members(split))?;
        let problem = BridgeProblem::new(&tr, kind, arm).map_err(|e| e.in_fold(split))?;
        let spectral = SpectralSplit::new(&problem, &val, grids.validation_lambda)?;
        for (t, s) in totals.iter_mut().zip(spectral.score_grid(grids)?) {
            *t += s;
        }
    }
    let scores: Vec<(BridgeParams, f64)> = candidates
        .iter()
        .zip(&totals)
        .map(|(c, t)| (*c, t / n_splits as f64))
        .collect();
    let mut best = 0;
    for (i, (c, s)) in scores.iter().enumerate().skip(1) {
        let (bc, bs) = scores[best];
        let tied = (s - bs).abs() <= 1e-12 * bs.abs().max(f64::MIN_POSITIVE);
        if *s < bs && !tied || tied && c.lambda_primal > bc.lambda_primal {
            best = i;
        }
    }
    if !scores[best].1.is_finite() {
        return Err(Error::Singular("every grid candidate failed to solve".into()));
    }
    Ok(HyperSelection {
        chosen: scores[best].0,
        scores,
    })
}
