//! Line-based `key = value` run configuration.
//!
//! Keys without a prefix are [`TrainConfig`] fields, `synth.*` keys are
//! [`SynthSpec`] fields and `model.*` keys shape the network. `#` starts a
//! comment. Unknown and repeated keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::decoders::DecoderKind;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{scale_layers, ModelConfig};
use crate::training::TrainConfig;

/// Network settings; everything unset falls back to the tiny preset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub decoder: DecoderKind,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub final_norm: bool,
    pub dropout: f32,
    pub width: usize,
    pub streams: usize,
    pub patch: usize,
    /// Explicit aux layers; `None` rescales the decoder's defaults to `depth`.
    pub aux_layers: Option<Vec<usize>>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::t_tiny(DecoderKind::Pup, 2, 64);
        Self {
            decoder: DecoderKind::Pup,
            depth: base.encoder.depth,
            hidden: base.encoder.hidden,
            heads: base.encoder.heads,
            mlp_ratio: base.encoder.mlp_ratio,
            final_norm: base.encoder.final_norm,
            dropout: base.encoder.dropout,
            width: base.decoder.width,
            streams: base.decoder.streams,
            patch: base.patch,
            aux_layers: None,
        }
    }
}

impl ModelSettings {
    /// Model for `classes` classes trained on `crop×crop` crops.
    pub fn build(&self, classes: usize, crop: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::t_tiny(self.decoder, classes, crop);
        cfg.encoder = EncoderConfig {
            depth: self.depth,
            hidden: self.hidden,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            final_norm: self.final_norm,
            dropout: self.dropout,
        };
        cfg.decoder.width = self.width;
        cfg.decoder.streams = self.streams;
        cfg.patch = self.patch;
        if self.patch == 0 || !crop.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("crop size {crop} is not a multiple of patch size {}", self.patch)));
        }
        cfg.grid = (crop / self.patch, crop / self.patch);
        cfg.aux_layers = match &self.aux_layers {
            Some(layers) => layers.clone(),
            None => scale_layers(self.decoder.default_aux_layers(), self.depth),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub model: ModelSettings,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{raw}`"))),
    }
}

fn list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, raw).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let m = &mut self.model;
        match key {
            "base_lr" => t.base_lr = value(key, raw)?,
            "momentum" => t.momentum = value(key, raw)?,
            "weight_decay" => t.weight_decay = value(key, raw)?,
            "total_iters" => t.total_iters = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "crop_size" => t.crop_size = value(key, raw)?,
            "poly_power" => t.poly_power = value(key, raw)?,
            "aux_weight" => t.aux_weight = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "augment" => t.augment = flag(key, raw)?,
            "scale_min" => t.scale_range.0 = value(key, raw)?,
            "scale_max" => t.scale_range.1 = value(key, raw)?,
            "eval_every" => t.eval_every = value(key, raw)?,
            "precise_bn" => t.precise_bn = flag(key, raw)?,
            "ignore_index" => t.ignore_index = value(key, raw)?,
            "synth.height" => s.height = value(key, raw)?,
            "synth.width" => s.width = value(key, raw)?,
            "synth.size" => {
                s.height = value(key, raw)?;
                s.width = s.height;
            }
            "synth.classes" => s.classes = value(key, raw)?,
            "synth.shapes_min" => s.shapes.0 = value(key, raw)?,
            "synth.shapes_max" => s.shapes.1 = value(key, raw)?,
            "synth.noise" => s.noise = value(key, raw)?,
            "synth.seed" => s.seed = value(key, raw)?,
            "synth.train" => s.train = value(key, raw)?,
            "synth.val" => s.val = value(key, raw)?,
            "model.decoder" => m.decoder = value(key, raw)?,
            "model.depth" => m.depth = value(key, raw)?,
            "model.hidden" => m.hidden = value(key, raw)?,
            "model.heads" => m.heads = value(key, raw)?,
            "model.mlp_ratio" => m.mlp_ratio = value(key, raw)?,
            "model.final_norm" => m.final_norm = flag(key, raw)?,
            "model.dropout" => m.dropout = value(key, raw)?,
            "model.width" => m.width = value(key, raw)?,
            "model.streams" => m.streams = value(key, raw)?,
            "model.patch" => m.patch = value(key, raw)?,
            "model.aux_layers" => {
                m.aux_layers = Some(if raw.is_empty() || raw == "none" { Vec::new() } else { list(key, raw)? })
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()
    }
}
