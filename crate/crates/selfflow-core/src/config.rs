//! Run configuration: everything needed to reproduce a training run from a
//! file plus a seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::fnv1a_hex;
use crate::model::TransformerConfig;
use crate::objectives::{AdamConfig, ObjectiveConfig, ObjectiveVariant};
use crate::schedules::TimestepDistribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub dataset: DatasetSpec,
    pub model: TransformerConfig,
    pub objective: ObjectiveConfig,
    pub distribution: TimestepDistribution,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Fréchet evaluation every this many steps (0 disables periodic eval;
    /// a final eval still runs when `eval_samples > 0`).
    pub eval_interval: u64,
    /// Checkpoint every this many steps (0 = final only).
    pub checkpoint_interval: u64,
    /// ODE steps and shift for sampling during evaluation.
    pub sample_steps: usize,
    pub sampleshift: f64,
    /// Samples drawn per Fréchet evaluation (0 disables).
    pub eval_samples: usize,
}

impl RunConfig {
    /// Defaults mirroring the reference recipe: gamma 0.8, EMA 0.9999,
    /// taps at 0.3·D and 0.7·D, masking ratio 0.25, uniform timesteps.
    pub fn toy_default(variant: ObjectiveVariant, seed: u64) -> RunConfig {
        let model = TransformerConfig::toy_default();
        let objective = ObjectiveConfig::for_variant(variant, &model);
        RunConfig {
            seed,
            data_seed: 1234,
            dataset: DatasetSpec::toy_default(1234, 8192, 2048),
            model,
            objective,
            distribution: TimestepDistribution::Uniform,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            total_steps: 20_000,
            eval_interval: 0,
            checkpoint_interval: 0,
            sample_steps: 50,
            sampleshift: 1.78,
            eval_samples: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.objective.validate(&self.model)?;
        self.distribution.validate()?;
        if self.model.tokens != crate::data::TOKENS
            || self.model.token_dim != crate::data::TOKEN_DIM
        {
            return Err(Error::Config(format!(
                "model expects {}x{} tokens, dataset produces {}x{}",
                self.model.tokens,
                self.model.token_dim,
                crate::data::TOKENS,
                crate::data::TOKEN_DIM,
            )));
        }
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, dataset {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if self.sample_steps == 0 || self.sampleshift <= 0.0 {
            return Err(Error::Config("sampling needs steps >= 1 and shift > 0".into()));
        }
        Ok(())
    }

    /// Hash stamped into every artifact this run emits.
    pub fn hash(&self) -> String {
        fnv1a_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::toy_default(ObjectiveVariant::SelfFlow, 3);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::toy_default(ObjectiveVariant::SelfFlow, 3);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_classes_rejected() {
        let mut cfg = RunConfig::toy_default(ObjectiveVariant::Vanilla, 1);
        cfg.model.num_classes = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn distribution_toml_shape() {
        let mut cfg = RunConfig::toy_default(ObjectiveVariant::Vanilla, 1);
        cfg.distribution = TimestepDistribution::LogitNormal {
            mu: 0.0,
            sigma: 1.0,
            trainshift: 1.78,
        };
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("kind = \"logit_normal\""), "{text}");
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.distribution, cfg.distribution);
    }
}
