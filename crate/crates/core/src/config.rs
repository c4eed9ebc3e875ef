//! Single JSON document holding every module's configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::LossConfig;
use crate::nn::{load_checkpoint, ParameterStore};
use crate::train::{TrainConfig, GEN_PREFIX};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stft: StftConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossConfig,
    pub data: DataConfig,
    pub trainer: TrainConfig,
}

impl RunConfig {
    /// Parses and validates; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                path: name.to_string(),
                message: e.to_string(),
            })
        };
        section("stft", self.stft.validate())?;
        section("generator", self.generator.validate())?;
        section("discriminator", self.discriminator.validate())?;
        section("losses", self.losses.validate())?;
        section("data", self.data.validate())?;
        section("trainer", self.trainer.validate())?;
        if self.stft.sample_rate != self.data.sample_rate {
            return Err(Error::Config {
                path: "data.sample_rate".into(),
                message: format!(
                    "{} Hz differs from stft.sample_rate {} Hz",
                    self.data.sample_rate, self.stft.sample_rate
                ),
            });
        }
        Ok(())
    }
}

/// Configuration, generator and generator parameters of a checkpoint
/// directory written by the trainer.
pub fn load_generator(dir: &Path) -> Result<(RunConfig, Generator, ParameterStore)> {
    let (params, meta) = load_checkpoint(dir)?;
    let cfg: RunConfig = serde_json::from_value(meta.config)
        .map_err(|e| Error::Checkpoint(format!("{}: config: {e}", dir.display())))?;
    let gen = Generator::new(cfg.stft, cfg.generator.clone())?;
    Ok((cfg, gen, params.subset(GEN_PREFIX)))
}
