//! Experiment configuration: a TOML file with one table per component plus
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::dataset::SplitRatio;
use crate::difficulty::{DEFAULT_FALLBACK_NEGATIVE, DEFAULT_FALLBACK_POSITIVE};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::text::TextModelConfig;
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyConfig {
    pub fallback_positive: f64,
    pub fallback_negative: f64,
    /// Fill unseen items from a text model when texts are available.
    pub use_text_model: bool,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            fallback_positive: DEFAULT_FALLBACK_POSITIVE,
            fallback_negative: DEFAULT_FALLBACK_NEGATIVE,
            use_text_model: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub valid_of_train: f64,
    pub test: f64,
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatio::default();
        Self {
            train: r.train,
            valid_of_train: r.valid_of_train,
            test: r.test,
            folds: 5,
        }
    }
}

impl SplitConfig {
    pub fn ratio(&self) -> SplitRatio {
        SplitRatio {
            train: self.train,
            valid_of_train: self.valid_of_train,
            test: self.test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub augmentation: AugmentationConfig,
    pub difficulty: DifficultyConfig,
    pub split: SplitConfig,
    pub text: TextModelConfig,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Apply one `section.key=value` override. The value is read as a TOML
    /// literal (`0.5`, `true`, `"mixed"`), falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value = parse_literal(raw);
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Serde(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one key");
        let mut node = &mut root;
        for k in parents {
            node = node
                .get_mut(*k)
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config section {k:?} in {path:?}")))?;
        }
        let table = node.as_table_mut().expect("checked above");
        let slot = table
            .get_mut(*last)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        // Integers are accepted where floats are expected.
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            self.set(o.as_ref())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.augmentation.validate()?;
        self.text.validate()?;
        self.split.ratio().validate()?;
        for v in [self.difficulty.fallback_positive, self.difficulty.fallback_negative] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { value: v });
            }
        }
        if self.split.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.split.folds)));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = ExperimentConfig::from_toml_str("[training]\nlambda_c = 0.5\n[model]\nembed_dim = 64\n").unwrap();
        assert_eq!(c.training.lambda_c, 0.5);
        assert_eq!(c.model.embed_dim, 64);
        assert_eq!(c.training.batch_size, 512);
        assert_eq!(c.model.num_heads, 8);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "training.lambda_c=0",
            "training.max_epochs = 3",
            "model.untied_encoders=true",
            "text.input=item_with_concept",
            "augmentation.mask_prob=1",
        ])
        .unwrap();
        assert_eq!(c.training.lambda_c, 0.0);
        assert_eq!(c.training.max_epochs, 3);
        assert!(c.model.untied_encoders);
        assert_eq!(c.text.input, crate::text::TextInput::ItemWithConcept);
        assert_eq!(c.augmentation.mask_prob, 1.0);
    }

    #[test]
    fn bad_overrides_are_reported() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("training.nope=1").is_err());
        assert!(c.set("nosection.x=1").is_err());
        assert!(c.set("training.max_epochs=abc").is_err());
        assert!(c.set("no_equals").is_err());
        assert!(c.apply_overrides(&["training.lambda_c=2"]).is_err());
    }
}
