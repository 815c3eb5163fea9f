//! TOML run configuration. Every section and key is optional; omitted values
//! take the library defaults.
//!
//! ```toml
//! [model]
//! configuration = "interpretable"
//! hidden_width = 64
//!
//! [training]
//! max_epochs = 100
//!
//! [pipeline]
//! std_threshold = 0.025
//!
//! [split]
//! train = 0.6
//! valid = 0.2
//! test = 0.2
//!
//! [synthetic]
//! patients = 200
//!
//! [analysis]
//! quantile = 0.25
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisSettings, TOP_QUANTILE};
use crate::data::SyntheticSpec;
use crate::model::{ModelConfig, ModelError};
use crate::preprocess::PipelineConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    /// Seeds patient assignment.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub quantile: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { quantile: TOP_QUANTILE }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub pipeline: PipelineConfig,
    pub split: SplitConfig,
    pub synthetic: SyntheticSpec,
    pub analysis: AnalysisConfig,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: AppConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a seed to every random stream: weight init, batch order,
    /// split membership and synthetic generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self.synthetic.seed = seed;
        self.split.seed = seed;
        self
    }

    /// Window geometry must agree between the pipeline, the model and the
    /// synthetic generator.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        if self.model.lookback != p.lookback_steps || self.model.horizon != p.horizon_steps {
            return Err(ConfigError::Invalid(format!(
                "model lookback/horizon {}/{} differ from pipeline {}/{}",
                self.model.lookback, self.model.horizon, p.lookback_steps, p.horizon_steps
            )));
        }
        let s = &self.synthetic;
        if s.step_min != p.step_min || s.window_steps != p.window_steps() || s.horizon_steps != p.horizon_steps {
            return Err(ConfigError::Invalid(
                "synthetic step_min/window_steps/horizon_steps differ from pipeline".into(),
            ));
        }
        if p.step_min <= 0 || p.smoothing_window == 0 || p.scale_max.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(ConfigError::Invalid(
                "pipeline step_min, smoothing_window and scale_max must be positive".into(),
            ));
        }
        if !(self.analysis.quantile > 0.0 && self.analysis.quantile <= 1.0) {
            return Err(ConfigError::Invalid("analysis quantile must lie in (0, 1]".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn analysis_settings(&self) -> AnalysisSettings {
        AnalysisSettings {
            quantile: self.analysis.quantile,
            step_min: self.pipeline.step_min,
            scale_max: self.pipeline.scale_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Configuration;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = AppConfig::from_toml(
            "[model]\nconfiguration = \"generic\"\nhidden_width = 32\n[training]\nmax_epochs = 7\n[split]\ntrain = 0.5\nvalid = 0.25\ntest = 0.25\n",
        )
        .unwrap();
        assert_eq!(c.model.configuration, Configuration::Generic);
        assert_eq!(c.model.hidden_width, 32);
        assert_eq!(c.training.max_epochs, 7);
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.split.fractions(), [0.5, 0.25, 0.25]);
        assert_eq!(AppConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_mismatched_geometry() {
        assert!(matches!(AppConfig::from_toml("[model]\nwidth = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            AppConfig::from_toml("[pipeline]\nlookback_steps = 60\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
