//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::imagecore::TvMode;
use crate::losses::{ContextualConfig, ExtractorConfig, LossWeights};
use crate::params::AdamConfig;
use crate::sampler::SamplerConfig;

/// Architecture and optimization settings shared by both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator_depth: usize,
    pub generator_width: usize,
    pub fusion_depth: usize,
    pub fusion_width: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
    /// Spectral normalization of the hinge discriminators.
    pub spectral_norm: bool,
    pub tv_mode: TvMode,
    pub sampler: SamplerConfig,
    pub extractor: ExtractorConfig,
    pub contextual: ContextualConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            generator_depth: 4,
            generator_width: 16,
            fusion_depth: 3,
            fusion_width: 8,
            disc_layers: 3,
            disc_width: 16,
            spectral_norm: true,
            tv_mode: TvMode::Literal,
            sampler: SamplerConfig::default(),
            extractor: ExtractorConfig::default(),
            contextual: ContextualConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.generator_depth", self.generator_depth),
            ("model.generator_width", self.generator_width),
            ("model.fusion_depth", self.fusion_depth),
            ("model.fusion_width", self.fusion_width),
            ("model.disc_layers", self.disc_layers),
            ("model.disc_width", self.disc_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.sampler.validate()?;
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("model.adam: need lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if !(self.contextual.h > 0.0 && self.contextual.eps > 0.0) {
            return Err(Error::Config("model.contextual: h and eps must be positive".into()));
        }
        Ok(())
    }

    /// Checks that an image side length fits every network.
    pub fn check_resolution(&self, n: usize) -> Result<()> {
        let depth = self.generator_depth.max(self.fusion_depth).max(self.sampler.downsample.trailing_zeros() as usize);
        if n < 8 || n % (1 << depth) != 0 {
            return Err(Error::Config(format!("resolution {n} must be at least 8 and divisible by 2^{depth}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    D2r,
    R2d,
}

/// Training schedule lengths, in optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Joint training of the streams (or of the appearance network).
    pub stream_steps: u64,
    /// Refinement network of the two-step variants.
    pub refine_steps: u64,
    /// Mask fusion network, with everything upstream frozen.
    pub fusion_steps: u64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { stream_steps: 200, refine_steps: 200, fusion_steps: 100, checkpoint_every: 0 }
    }
}

impl Schedule {
    pub fn total(&self) -> u64 {
        self.stream_steps + self.refine_steps + self.fusion_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; generated from `synth` by `synth-data`.
    pub path: PathBuf,
    /// Samples (in id order) used for training; the rest are the test set.
    /// `None` trains on everything.
    pub train_count: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: PathBuf::from("data"), train_count: None, synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Ablation variant name; see the pipeline variant enums.
    pub variant: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: Schedule,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::D2r,
            variant: "full".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/d2r"),
            schedule: Schedule::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        match self.task {
            Task::D2r => {
                crate::d2r::D2RVariant::parse(&self.variant)?;
            }
            Task::R2d => {
                crate::r2d::R2DVariant::parse(&self.variant)?;
            }
        }
        Ok(())
    }

    /// Applies a `dotted.key=value` override, re-validating afterwards.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .map(|mut t| t.remove("v").expect("key v"))
            .unwrap_or_else(|_| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut doc;
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a table")))?;
        }
        table.insert(last.to_string(), parsed);
        let cfg: RunConfig = toml::from_str(&toml::to_string(&doc).expect("table serializes"))
            .map_err(|e| Error::Config(format!("override `{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}
