use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bodymodel::ToySizes;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::projection::{DenoiserConfig, FitConfig, ProjectorConfig, TrainConfig};

/// Measurement protocol for latency runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub warmup: usize,
    pub frames: usize,
    /// Distinct synthetic scenes cycled through during a run.
    pub scenes: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            warmup: 10,
            frames: 100,
            scenes: 8,
        }
    }
}

/// Everything a subcommand may read. Missing sections take their defaults;
/// unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the toy body models and the frozen decoder weights.
    pub model_seed: u64,
    pub models: ToySizes,
    pub decoder: DecoderConfig,
    /// Fast-path toggles; `run --mode serial` ignores them.
    pub pipeline: PipelineConfig,
    pub bench: BenchSettings,
    pub fit: FitConfig,
    pub projector: ProjectorConfig,
    pub train: TrainConfig,
    pub denoiser: DenoiserConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.mhr_vertices == 0 || self.models.smpl_vertices == 0 {
            return Err(Error::Config("model vertex counts must be positive".into()));
        }
        self.decoder.validate().map_err(as_config)?;
        self.pipeline
            .validate(self.decoder.body_layers, self.decoder.hand_layers)
            .map_err(as_config)?;
        if self.bench.frames == 0 || self.bench.scenes == 0 {
            return Err(Error::Config(
                "bench frames and scenes must be positive".into(),
            ));
        }
        self.fit.validate()?;
        self.train.validate()?;
        self.denoiser.validate()?;
        if self.projector.subsample == 0 || self.projector.subsample > self.models.smpl_vertices {
            return Err(Error::Config(format!(
                "projector subsample {} must be in 1..={}",
                self.projector.subsample, self.models.smpl_vertices
            )));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        e => Error::Config(e.to_string()),
    }
}
