//! The assembled segmenter: sequentializer, encoder, one decoder and the
//! auxiliary heads, together with its parameters and checkpoint metadata.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;

use crate::decoders::{
    aux_decode, init_aux_head, mla_decode, naive_decode, pup_decode, DecoderConfig, DecoderKind, DecoderOutput,
    OutputSize,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderFeatures};
use crate::error::{invalid, Error, Result};
use crate::params::{trunc_normal, Graph, Mode, ParamStore};
use crate::sequentializer::{check_image, embed_sequence, interpolate_pos_var, PositionEmbedding, DEFAULT_PATCH};
use crate::tensor::{MapShape, Tensor, Var};

const META_VERSION: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub patch: usize,
    /// Patch grid the position table is learned on, `(gh, gw)`.
    pub grid: (usize, usize),
    /// Encoder layers (1-based) carrying an auxiliary head during training.
    pub aux_layers: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale model for `crop×crop` inputs: the tiny encoder, the default
    /// decoder and the decoder's aux layers rescaled to depth 4.
    pub fn t_tiny(kind: DecoderKind, classes: usize, crop: usize) -> Self {
        let encoder = EncoderConfig::t_tiny();
        let aux_layers = scale_layers(kind.default_aux_layers(), encoder.depth);
        Self {
            encoder,
            decoder: DecoderConfig::new(kind, classes),
            patch: DEFAULT_PATCH,
            grid: (crop / DEFAULT_PATCH, crop / DEFAULT_PATCH),
            aux_layers,
        }
    }

    pub fn classes(&self) -> usize {
        self.decoder.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.depth, self.encoder.hidden)?;
        if self.patch == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(invalid("patch size and position grid must be positive"));
        }
        if let Some(&l) = self.aux_layers.iter().find(|&&l| l == 0 || l > self.encoder.depth) {
            return Err(invalid(format!("aux layer {l} outside 1..={}", self.encoder.depth)));
        }
        Ok(())
    }

    fn to_meta(&self) -> Tensor {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut v = vec![
            META_VERSION,
            e.depth as f32,
            e.hidden as f32,
            e.heads as f32,
            e.mlp_ratio as f32,
            e.final_norm as u8 as f32,
            e.dropout,
            d.kind.code() as f32,
            d.classes as f32,
            d.width as f32,
            d.streams as f32,
            self.patch as f32,
            self.grid.0 as f32,
            self.grid.1 as f32,
            self.aux_layers.len() as f32,
        ];
        v.extend(self.aux_layers.iter().map(|&l| l as f32));
        Tensor::new(&[v.len()], v).expect("nonempty meta")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let v = t.data();
        let corrupt = || Error::Corrupt("malformed model metadata".into());
        if v.len() < 15 || v[0] != META_VERSION {
            return Err(corrupt());
        }
        let u = |i: usize| -> Result<usize> {
            let x = *v.get(i).ok_or_else(corrupt)?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(corrupt());
            }
            Ok(x as usize)
        };
        let n_aux = u(14)?;
        if v.len() != 15 + n_aux {
            return Err(corrupt());
        }
        let cfg = Self {
            encoder: EncoderConfig {
                depth: u(1)?,
                hidden: u(2)?,
                heads: u(3)?,
                mlp_ratio: u(4)?,
                final_norm: u(5)? != 0,
                dropout: v[6],
            },
            decoder: DecoderConfig {
                kind: DecoderKind::from_code(u(7)? as u32)?,
                classes: u(8)?,
                width: u(9)?,
                streams: u(10)?,
            },
            patch: u(11)?,
            grid: (u(12)?, u(13)?),
            aux_layers: (0..n_aux).map(|i| u(15 + i)).collect::<Result<_>>()?,
        };
        cfg.validate().map_err(|e| Error::Corrupt(format!("model metadata: {e}")))?;
        Ok(cfg)
    }
}

/// Maps layer indices given for a 24-layer encoder onto `depth` layers:
/// `round(l·depth/24)`, clamped to `1..=depth`, duplicates dropped.
pub fn scale_layers(layers: &[usize], depth: usize) -> Vec<usize> {
    let mut out: Vec<usize> =
        layers.iter().map(|&l| ((l * depth) as f64 / 24.0).round().clamp(1.0, depth as f64) as usize).collect();
    out.dedup();
    out
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// `(layer, logits)` per auxiliary head, when requested.
    pub aux: Vec<(usize, Var)>,
    pub features: EncoderFeatures,
    pub decoder: DecoderOutput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub aux: bool,
    pub keep_attention: bool,
}

pub struct Setr {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Interpolated eval-mode tables per grid, each with the stored table it
    /// was computed from.
    pos_cache: Mutex<HashMap<(usize, usize), (Tensor, Tensor)>>,
}

impl Clone for Setr {
    fn clone(&self) -> Self {
        Self::from_parts(self.config.clone(), self.store.clone())
    }
}

impl std::fmt::Debug for Setr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Setr").field("config", &self.config).field("params", &self.store.len()).finish()
    }
}

impl Setr {
    /// Randomly initialized model.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.encoder.hidden;
        let p = config.patch;
        let (gh, gw) = config.grid;
        let mut store = ParamStore::new();
        store.insert("embed.proj.w", trunc_normal(&[p * p * 3, c], 0.02, rng));
        store.insert("embed.proj.b", Tensor::zeros(&[c]));
        store.insert("embed.pos", trunc_normal(&[gh * gw, c], 0.02, rng));
        config.encoder.init_params(&mut store, rng);
        config.decoder.init_params(&mut store, c, rng);
        for &l in &config.aux_layers {
            init_aux_head(&mut store, l, c, config.decoder.width, config.classes(), rng);
        }
        store.insert_buffer("data.mean", Tensor::zeros(&[3]));
        store.insert_buffer("data.std", Tensor::full(&[3], 1.0));
        Ok(Self::from_parts(config, store))
    }

    fn from_parts(config: ModelConfig, store: ParamStore) -> Self {
        Self { config, store, pos_cache: Mutex::new(HashMap::new()) }
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    /// Sets the per-channel input normalization stored with the model.
    pub fn set_normalization(&mut self, mean: [f32; 3], std: [f32; 3]) -> Result<()> {
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("normalization std must be positive, got {std:?}")));
        }
        self.store.insert_buffer("data.mean", Tensor::new(&[3], mean.to_vec())?);
        self.store.insert_buffer("data.std", Tensor::new(&[3], std.to_vec())?);
        Ok(())
    }

    pub fn normalization(&self) -> ([f32; 3], [f32; 3]) {
        let get = |name: &str, default: f32| -> [f32; 3] {
            self.store.buffer(name).and_then(|t| t.data().try_into().ok()).unwrap_or([default; 3])
        };
        (get("data.mean", 0.0), get("data.std", 1.0))
    }

    /// Converts 8-bit interleaved RGB to a normalized `[H, W, 3]` tensor.
    pub fn normalize_rgb(&self, rgb: &[u8], h: usize, w: usize) -> Result<Tensor> {
        if rgb.len() != h * w * 3 {
            return Err(Error::Shape { op: "normalize_rgb", lhs: vec![h, w, 3], rhs: vec![rgb.len()] });
        }
        let (mean, std) = self.normalization();
        Tensor::new(&[h, w, 3], rgb.iter().enumerate().map(|(i, &v)| (v as f32 - mean[i % 3]) / std[i % 3]).collect())
    }

    /// Current position table.
    pub fn position_embedding(&self) -> Result<PositionEmbedding> {
        let (gh, gw) = self.config.grid;
        PositionEmbedding::new(gh, gw, self.store.get("embed.pos")?.clone())
    }

    /// Position table for a `gh×gw` grid. Train mode resizes on the tape so
    /// the stored table is trained; eval mode caches one table per grid.
    fn position_var(&self, g: &mut Graph, gh: usize, gw: usize) -> Result<Var> {
        let (sh, sw) = self.config.grid;
        if (gh, gw) == (sh, sw) || g.mode() == Mode::Train {
            let pos = g.param("embed.pos")?;
            return interpolate_pos_var(&mut g.tape, pos, sh, sw, gh, gw);
        }
        let source = self.store.get("embed.pos")?;
        let mut cache = self.pos_cache.lock().expect("position cache poisoned");
        let table = match cache.get(&(gh, gw)) {
            Some((from, t)) if from.same_values(source) => t.clone(),
            _ => {
                let t = self.position_embedding()?.interpolate(gh, gw)?.table;
                cache.insert((gh, gw), (source.clone(), t.clone()));
                t
            }
        };
        Ok(g.tape.constant(table))
    }

    /// Forward pass on a normalized batch `[N, H, W, 3]`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, opts: ForwardOptions) -> Result<ModelOutput> {
        let shape = MapShape::of(images.shape())?;
        let p = self.config.patch;
        if shape.c != 3 || shape.h % p != 0 || shape.w % p != 0 {
            return Err(invalid(format!(
                "input {}x{}x{} is not an RGB image divisible by patch size {p}",
                shape.h, shape.w, shape.c
            )));
        }
        let size = OutputSize { gh: shape.h / p, gw: shape.w / p, h: shape.h, w: shape.w };
        let x = g.tape.constant(images.clone());
        let patches = g.tape.patchify(x, p)?;
        let proj_w = g.param("embed.proj.w")?;
        let proj_b = g.param("embed.proj.b")?;
        let pos = self.position_var(g, size.gh, size.gw)?;
        let e = embed_sequence(&mut g.tape, patches, proj_w, proj_b, pos)?;
        let features = encoder_forward(g, &self.config.encoder, e, opts.keep_attention)?;
        let decoder = match self.config.decoder.kind {
            DecoderKind::Naive => naive_decode(g, features.last(), size)?,
            DecoderKind::Pup => pup_decode(g, features.last(), size)?,
            DecoderKind::Mla => mla_decode(g, &features, self.config.decoder.streams, size)?,
        };
        let mut aux = Vec::new();
        if opts.aux {
            for &l in &self.config.aux_layers {
                aux.push((l, aux_decode(g, l, features.layer(l)?, size)?));
            }
        }
        Ok(ModelOutput { logits: decoder.logits, aux, features, decoder })
    }

    /// Eval-mode logits `[H, W, K]` for one normalized `[H, W, 3]` image.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image, self.config.patch)?;
        let [h, w, _] = image.shape()[..] else { unreachable!() };
        let batch = image.clone().reshape(&[1, h, w, 3])?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.forward(&mut g, &batch, ForwardOptions::default())?;
        g.tape.value(out.logits).clone().reshape(&[h, w, self.classes()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.store.clone();
        store.insert_buffer("meta.model", self.config.to_meta());
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let meta = store
            .buffer("meta.model")
            .ok_or_else(|| Error::Corrupt(format!("{} has no model metadata", path.display())))?;
        let config = ModelConfig::from_meta(meta)?;
        Ok(Self::from_parts(config, store))
    }
}
