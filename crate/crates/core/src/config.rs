//! Run configuration: one JSON document in which every key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, LayerRouting};
use crate::backbone::LayeredBackbone;
use crate::checkpoint::hex;
use crate::denoiser::{DenoiserConfig, DenoiserTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, EMBED_DIM};
use crate::pairgen::DatasetConfig;
use crate::subspace::TrunkConfig;

pub const CONFIG_ENV: &str = "CRAFTLORA_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.15 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Explicit layer sets; empty means first half content, second half style.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub content: Vec<String>,
    pub style: Vec<String>,
}

impl RoutingConfig {
    pub fn resolve(&self, host: &LayeredBackbone) -> Result<LayerRouting> {
        let routing = if self.content.is_empty() && self.style.is_empty() {
            LayerRouting::split_halves(host)
        } else {
            LayerRouting::new(self.content.clone(), self.style.clone())?
        };
        routing.check_host(host)?;
        Ok(routing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub extractor_seed: u64,
    /// Cutoff separating the content and style channels in the metrics.
    pub sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { extractor_seed: 7, sigma: crate::pairgen::DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub base: DenoiserTrainConfig,
    pub trunk: TrunkConfig,
    pub adapter: AdapterConfig,
    pub routing: RoutingConfig,
    pub guidance: GuidanceConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Explicit path, else `$CRAFTLORA_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.denoiser.cond_dim != EMBED_DIM {
            return Err(Error::ConfigInvalid(format!("denoiser.cond_dim must equal the text embedding size {EMBED_DIM}")));
        }
        self.schedule.build()?;
        if self.base.batch_size == 0 || !(self.base.lr > 0.0) || !(0.0..=1.0).contains(&self.base.cond_dropout) {
            return Err(Error::ConfigInvalid("base training needs batch > 0, lr > 0, dropout in [0,1]".into()));
        }
        self.trunk.validate()?;
        self.adapter.validate()?;
        self.guidance.validate()?;
        if self.guidance.steps != self.schedule.steps {
            return Err(Error::ConfigInvalid(format!(
                "guidance.steps ({}) must equal schedule.steps ({})",
                self.guidance.steps, self.schedule.steps
            )));
        }
        self.dataset.validate()?;
        if self.dataset.side != self.denoiser.side {
            return Err(Error::ConfigInvalid("dataset.side must equal denoiser.side".into()));
        }
        if !(self.eval.sigma > 0.0 && self.eval.sigma <= 1.0) {
            return Err(Error::BadCutoff(self.eval.sigma));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "trunk": {"steps": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trunk.steps, 3);
        assert_eq!(cfg.trunk.r_max, TrunkConfig::default().r_max);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"guidance": {"omega": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": {"steps": 20}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"nonsense": 1}"#).is_err());
        assert!(RunConfig::from_json("[").is_err());
    }
}
