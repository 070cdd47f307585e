//! Targeting operator characteristic, its area (AUTOC) and bootstrap
//! standard errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{fit_plearner, PipelineConfig};
use crate::scores::{crossfit_nuisances, pseudo_outcomes};
use crate::seeds::{derive_indexed, derive_seed};

/// Redraws allowed per replicate before a degenerate resample is an error.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Largest priorities first.
    #[default]
    BenefitDesc,
    /// Smallest priorities first, for outcomes where negative effects are
    /// the benefit.
    HarmAsc,
}

/// Unit order for `direction`: stable, so equal priorities keep index order.
fn ranking(priorities: &[f64], direction: Direction) -> Vec<usize> {
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    match direction {
        Direction::BenefitDesc => order.sort_by(|&i, &j| priorities[j].total_cmp(&priorities[i])),
        Direction::HarmAsc => order.sort_by(|&i, &j| priorities[i].total_cmp(&priorities[j])),
    }
    order
}

/// `TOC(k/m) = mean(Γ over the top k) - mean(Γ)` for `k = 1..m`.
///
/// Units with equal priority cannot be ordered, so a prefix that cuts a tied
/// block takes that block at its average score. Constant priorities therefore
/// give a curve that is identically zero.
pub fn toc_curve(priorities: &[f64], gamma: &[f64], direction: Direction) -> Result<Vec<(f64, f64)>> {
    let m = priorities.len();
    if gamma.len() != m {
        return Err(Error::DimensionMismatch(format!("{m} priorities, {} scores", gamma.len())));
    }
    if m < 2 {
        return Err(Error::TooFewUnits(m));
    }
    if priorities.iter().chain(gamma).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in priorities or scores".into()));
    }
    let mf = m as f64;
    let q = |k: usize| k as f64 / mf;
    let first = gamma[0];
    if gamma.iter().all(|&g| g == first) {
        return Ok((1..=m).map(|k| (q(k), 0.0)).collect());
    }
    let order = ranking(priorities, direction);
    let sorted: Vec<f64> = order.iter().map(|&i| gamma[i]).collect();
    let total: f64 = sorted.iter().sum();
    let overall = total / mf;
    let mut toc = Vec::with_capacity(m);
    let mut before = 0.0;
    let mut start = 0;
    while start < m {
        let p = priorities[order[start]];
        let mut end = start + 1;
        while end < m && priorities[order[end]] == p {
            end += 1;
        }
        let block_sum: f64 = sorted[start..end].iter().sum();
        let block_mean = if start == 0 && end == m { overall } else { block_sum / (end - start) as f64 };
        for k in start + 1..=end {
            let prefix_mean = if start == 0 {
                if end - start == 1 {
                    sorted[0]
                } else {
                    block_mean
                }
            } else if k == end {
                (before + block_sum) / k as f64
            } else {
                block_mean + (before - start as f64 * block_mean) / k as f64
            };
            let value = if k == m { 0.0 } else { prefix_mean - overall };
            toc.push((q(k), value));
        }
        before += block_sum;
        start = end;
    }
    Ok(toc)
}

/// Equal-weight average of the TOC over the unit grid.
pub fn autoc(toc: &[(f64, f64)]) -> Result<f64> {
    if toc.is_empty() {
        return Err(Error::InvalidArgument("empty TOC curve".into()));
    }
    Ok(toc.iter().map(|t| t.1).sum::<f64>() / toc.len() as f64)
}

pub fn autoc_of(priorities: &[f64], gamma: &[f64], direction: Direction) -> Result<f64> {
    autoc(&toc_curve(priorities, gamma, direction)?)
}

/// Bootstrap replicates and their standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub replicates: Vec<f64>,
}

/// Nonparametric bootstrap of the AUTOC over `(priority, Γ)` pairs with
/// nuisances held fixed. Replicate `b` draws from its own seeded stream, so
/// the result does not depend on thread count.
pub fn bootstrap_autoc(
    priorities: &[f64],
    gamma: &[f64],
    direction: Direction,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if n_boot < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bootstrap replicates, got {n_boot}")));
    }
    let m = priorities.len();
    toc_curve(priorities, gamma, direction)?;
    let replicates: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "bootstrap", b as u64));
            for _ in 0..MAX_REDRAWS {
                let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
                if idx.iter().all(|&i| i == idx[0]) {
                    continue;
                }
                let p: Vec<f64> = idx.iter().map(|&i| priorities[i]).collect();
                let g: Vec<f64> = idx.iter().map(|&i| gamma[i]).collect();
                return autoc_of(&p, &g, direction);
            }
            Err(Error::Bootstrap(format!(
                "replicate {b}: {MAX_REDRAWS} resamples in a row had fewer than 2 distinct units"
            )))
        })
        .collect();
    let replicates = replicates.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean = replicates.iter().sum::<f64>() / n_boot as f64;
    let var = replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64;
    Ok(BootstrapResult {
        se: var.sqrt(),
        replicates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub toc: Vec<(f64, f64)>,
    pub autoc: f64,
    pub autoc_se: f64,
    pub direction: Direction,
    pub n_eval: usize,
    pub n_train: usize,
    pub n_boot: usize,
    pub seed: u64,
    /// Column label of the text table.
    pub learner: String,
    pub notes: Vec<String>,
}

impl RateReport {
    pub fn from_scores(
        priorities: &[f64],
        gamma: &[f64],
        direction: Direction,
        n_boot: usize,
        seed: u64,
        learner: &str,
    ) -> Result<RateReport> {
        let toc = toc_curve(priorities, gamma, direction)?;
        let boot = bootstrap_autoc(priorities, gamma, direction, n_boot, seed)?;
        Ok(RateReport {
            autoc: autoc(&toc)?,
            toc,
            autoc_se: boot.se,
            direction,
            n_eval: priorities.len(),
            n_train: 0,
            n_boot,
            seed,
            learner: learner.to_string(),
            notes: vec![
                "bootstrap resamples (priority, score) pairs jointly with nuisances held fixed".into(),
                "tied priorities enter a prefix at their block-average score".into(),
            ],
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn toc_csv(&self) -> String {
        let mut s = String::from("q,toc\n");
        for (q, t) in &self.toc {
            s.push_str(&format!("{q},{t}\n"));
        }
        s
    }

    /// Two-row table: `AUTOC` and `Std.err`.
    pub fn to_text(&self) -> String {
        let est = format!("{:.2}", self.autoc);
        let se = format!("({:.2})", self.autoc_se);
        let w = self.learner.len().max(est.len()).max(se.len());
        let rule = "-".repeat(9 + w);
        format!(
            "{rule}\n{:<7}  {:>w$}\n{rule}\n{:<7}  {:>w$}\n{:<7}  {:>w$}\n{rule}\n",
            "", self.learner, "AUTOC", est, "Std.err", se
        )
    }
}

/// Splits `data` at random, trains the P-learner on the first part,
/// cross-fits scores on the held-out part and evaluates the learned
/// priorities there. `train_fraction` is the share of units used for
/// training.
pub fn evaluate_plearner(
    data: &Dataset,
    train_fraction: f64,
    config: &PipelineConfig,
    direction: Direction,
    n_boot: usize,
    seed: u64,
) -> Result<RateReport> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = data.n();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::InvalidArgument(format!("split leaves {n_train} / {} units", n - n_train)));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "rate/split")));
    let mut train_idx = perm[..n_train].to_vec();
    let mut eval_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let train = data.subset(&train_idx)?;
    let eval = data.subset(&eval_idx)?;
    for (name, part) in [("training", &train), ("evaluation", &eval)] {
        part.require_both_arms()
            .map_err(|e| Error::InvalidArgument(format!("{name} split: {e}")))?;
    }
    let fitted = fit_plearner(&train, config, derive_seed(seed, "rate/train"))?;
    let nuis = crossfit_nuisances(&eval, &config.nuisance, derive_seed(seed, "rate/eval"))?;
    let scores = pseudo_outcomes(&eval, &nuis, config.clip)?;
    let priorities = fitted.model.predict(eval.x())?;
    let mut report = RateReport::from_scores(
        &priorities,
        &scores.gamma,
        direction,
        n_boot,
        derive_seed(seed, "rate/bootstrap"),
        config.learner_label(),
    )?;
    report.n_train = n_train;
    report.seed = seed;
    if scores.clip_applied {
        report.notes.push(format!(
            "{} evaluation q values clipped to {:?}",
            scores.clipped.iter().filter(|&&c| c).count(),
            config.clip
        ));
    }
    Ok(report)
}
