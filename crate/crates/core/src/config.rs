//! Experiment configuration, read from JSON or TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::morphology::MorphFilterSpec;
use crate::nets::{ArchSpec, Variant};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    KFold { n_folds: usize },
    Holdout { n_test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::KFold { n_folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for splits and model initialization.
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureSpec,
    pub model: ArchSpec,
    pub train: TrainConfig,
    /// Filter applied to the binarized model output.
    pub morph: Option<MorphFilterSpec>,
    /// Filter applied to every input sensor channel before feature expansion.
    pub input_morph: Option<MorphFilterSpec>,
    pub split: SplitSpec,
    /// Window sizes searched for the windowed baselines.
    pub window_grid: Vec<usize>,
    /// Folds of the inner split used to pick a window.
    pub window_folds: usize,
    /// Independent initializations per fold.
    pub runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            features: FeatureSpec::default(),
            model: ArchSpec::preset(Variant::Final),
            train: TrainConfig::default(),
            morph: Some(MorphFilterSpec::default()),
            input_morph: None,
            split: SplitSpec::default(),
            window_grid: vec![0, 2, 5, 10],
            window_folds: 3,
            runs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(m) = &self.morph {
            m.validate()?;
        }
        if let Some(m) = &self.input_morph {
            m.validate()?;
        }
        match self.split {
            SplitSpec::KFold { n_folds } if n_folds < 2 => {
                return Err(Error::Config("k-fold split needs at least 2 folds".into()))
            }
            SplitSpec::Holdout { n_test: 0 } => return Err(Error::Config("holdout needs test files".into())),
            _ => {}
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.window_grid.len() > 1 && self.window_folds < 2 {
            return Err(Error::Config("window search needs at least 2 inner folds".into()));
        }
        Ok(())
    }

    /// Parses TOML for `.toml` paths and JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let config = if is_toml {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
        .map_err(|e| Error::in_file(path, e))?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}
