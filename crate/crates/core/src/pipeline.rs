//! Two-stage P-learner: cross-fit bridge nuisances and scores, then a
//! final-stage regression of the scores on the covariates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cate::{default_lambda_grid, fit_kernel_ridge, fit_linear, weighted_rows, CateFamily, CateModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scores::{
    catt_pseudo, crossfit_catt_nuisances, crossfit_nuisances, pseudo_outcomes, CattNuisances, CrossfitNuisances,
    NuisanceConfig, ScoreVector,
};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// Conditional average treatment effect.
    #[default]
    Cate,
    /// Conditional average treatment effect on the treated.
    Catt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub estimand: Estimand,
    pub nuisance: NuisanceConfig,
    /// Upper clip on `q̂` when forming scores; `None` leaves it untouched.
    pub clip: Option<f64>,
    pub final_stage: CateFamily,
    pub cate_lambda_grid: Vec<f64>,
    pub cate_splits: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            estimand: Estimand::Cate,
            nuisance: NuisanceConfig::default(),
            clip: Some(50.0),
            final_stage: CateFamily::KernelRidge,
            cate_lambda_grid: default_lambda_grid(),
            cate_splits: 5,
        }
    }
}

impl PipelineConfig {
    /// Reads a configuration from JSON or TOML (by extension; JSON first
    /// otherwise). Absent keys take their defaults.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let is_toml = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let config: PipelineConfig = if is_toml {
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?
        } else {
            match serde_json::from_str(&text) {
                Ok(c) => c,
                Err(json_err) => toml::from_str(&text)
                    .map_err(|e| Error::InvalidArgument(format!("config is not JSON ({json_err}) nor TOML ({e})")))?,
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.nuisance.validate()?;
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip must be positive, got {c}")));
            }
        }
        if self.cate_lambda_grid.is_empty() || self.cate_lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidArgument("cate_lambda_grid must be non-empty and positive".into()));
        }
        if self.cate_splits < 2 {
            return Err(Error::InvalidArgument("cate_splits must be >= 2".into()));
        }
        Ok(())
    }

    pub fn learner_label(&self) -> &'static str {
        match self.final_stage {
            CateFamily::KernelRidge => "Kernel ridge",
            CateFamily::Linear => "Linear",
        }
    }

    /// Regresses the scores on the covariates of `data` using the units with
    /// positive weight.
    pub fn fit_final_stage(&self, data: &Dataset, scores: &ScoreVector, seed: u64) -> Result<CateModel> {
        if scores.len() != data.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {} units",
                scores.len(),
                data.n()
            )));
        }
        let (x, y) = weighted_rows(data.x(), &scores.gamma, &scores.weights);
        match self.final_stage {
            CateFamily::KernelRidge => fit_kernel_ridge(
                x.as_ref(),
                &y,
                &self.cate_lambda_grid,
                self.cate_splits.min(y.len()),
                derive_seed(seed, "final-stage"),
            ),
            CateFamily::Linear => fit_linear(x.as_ref(), &y, data.x_names()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "estimand", rename_all = "snake_case")]
pub enum Nuisances {
    Cate(CrossfitNuisances),
    Catt(CattNuisances),
}

/// Output of the full two-stage fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlearnerFit {
    pub nuisances: Nuisances,
    pub scores: ScoreVector,
    pub model: CateModel,
    /// In-sample `τ̂(X_i)`.
    pub tau_hat: Vec<f64>,
}

/// Cross-fit scores on `data` for the configured estimand.
pub fn fit_scores(data: &Dataset, config: &PipelineConfig, seed: u64) -> Result<(Nuisances, ScoreVector)> {
    config.validate()?;
    let seed = derive_seed(seed, "nuisances");
    match config.estimand {
        Estimand::Cate => {
            let nuis = crossfit_nuisances(data, &config.nuisance, seed)?;
            let scores = pseudo_outcomes(data, &nuis, config.clip)?;
            Ok((Nuisances::Cate(nuis), scores))
        }
        Estimand::Catt => {
            let nuis = crossfit_catt_nuisances(data, &config.nuisance, seed)?;
            let scores = catt_pseudo(data, &nuis)?;
            Ok((Nuisances::Catt(nuis), scores))
        }
    }
}

/// Cross-fits the nuisances, forms scores and fits the final stage.
pub fn fit_plearner(data: &Dataset, config: &PipelineConfig, seed: u64) -> Result<PlearnerFit> {
    let (nuisances, scores) = fit_scores(data, config, seed)?;
    let model = config.fit_final_stage(data, &scores, seed)?;
    let tau_hat = model.predict(data.x())?;
    Ok(PlearnerFit {
        nuisances,
        scores,
        model,
        tau_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_files_keep_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "final_stage = \"linear\"\n[nuisance.hyper]\nlambda_primal_grid = [1e-3]\n").unwrap();
        let cfg = PipelineConfig::from_path(&toml_path).unwrap();
        assert_eq!(cfg.final_stage, CateFamily::Linear);
        assert_eq!(cfg.nuisance.hyper.lambda_primal_grid, [1e-3]);
        assert_eq!(cfg.nuisance.hyper.lambda_adversary_grid, NuisanceConfig::default().hyper.lambda_adversary_grid);
        assert_eq!(cfg.clip, Some(50.0));

        let json_path = dir.path().join("c.cfg");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(PipelineConfig::from_path(&json_path).unwrap(), cfg);

        std::fs::write(&json_path, "{\"cate_splits\": 1}").unwrap();
        assert!(PipelineConfig::from_path(&json_path).is_err());
    }
}
