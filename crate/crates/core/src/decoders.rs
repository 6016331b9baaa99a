//! Pixel-level decoders over encoder features: Naive, progressive upsampling
//! (PUP) and multi-level aggregation (MLA), plus the auxiliary heads.
//!
//! Every decoder first reshapes `[N, L, C]` features into an NHWC map of
//! `gh×gw×C` and ends with `[N, H, W, K]` logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::EncoderFeatures;
use crate::error::{invalid, Error, Result};
use crate::params::{init_conv_bias, init_conv_bn, Graph, ParamStore};
use crate::tensor::{Tape, Var};

/// Number of 2× upsampling stages in the PUP head.
pub const PUP_STAGES: usize = 4;
/// Default channel width of the Naive, PUP and auxiliary heads.
pub const DEFAULT_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Naive,
    Pup,
    Mla,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Pup => "pup",
            Self::Mla => "mla",
        }
    }

    pub(crate) fn code(self) -> u32 {
        self as u32
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        [Self::Naive, Self::Pup, Self::Mla]
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Corrupt(format!("unknown decoder code {code}")))
    }

    /// Auxiliary-loss layers for a 24-layer encoder.
    pub fn default_aux_layers(self) -> &'static [usize] {
        match self {
            Self::Naive => &[10, 15, 20],
            Self::Pup => &[10, 15, 20, 24],
            Self::Mla => &[6, 12, 18, 24],
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Self::Naive),
            "pup" => Ok(Self::Pup),
            "mla" => Ok(Self::Mla),
            other => Err(invalid(format!("unknown decoder '{other}' (expected naive, pup or mla)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub classes: usize,
    /// Channel width of the Naive and PUP convolutions and the aux heads.
    pub width: usize,
    /// MLA stream count `M`.
    pub streams: usize,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, classes: usize) -> Self {
        Self { kind, classes, width: DEFAULT_WIDTH, streams: 4 }
    }

    pub fn validate(&self, depth: usize, hidden: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.width == 0 {
            return Err(invalid("decoder width must be positive"));
        }
        if self.kind == DecoderKind::Mla {
            mla_layers(depth, self.streams)?;
            if !hidden.is_multiple_of(4) {
                return Err(invalid(format!("MLA halves the hidden size twice; {hidden} is not divisible by 4")));
            }
        }
        Ok(())
    }

    /// Registers the decoder's parameters under `dec.{kind}.*`.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, hidden: usize, rng: &mut R) {
        let (w, k) = (self.width, self.classes);
        match self.kind {
            DecoderKind::Naive => {
                init_conv_bn(store, "dec.naive.block", 1, hidden, w, rng);
                init_conv_bias(store, "dec.naive.cls", 1, w, k, rng);
            }
            DecoderKind::Pup => {
                for s in 1..=PUP_STAGES {
                    let cin = if s == 1 { hidden } else { w };
                    init_conv_bn(store, &format!("dec.pup.stage{s}"), 3, cin, w, rng);
                }
                init_conv_bias(store, "dec.pup.cls", 1, w, k, rng);
            }
            DecoderKind::Mla => {
                let (half, quarter) = (hidden / 2, hidden / 4);
                for s in 1..=self.streams {
                    let p = format!("dec.mla.s{s}");
                    init_conv_bn(store, &format!("{p}.reduce"), 1, hidden, half, rng);
                    init_conv_bn(store, &format!("{p}.fuse"), 3, half, half, rng);
                    init_conv_bn(store, &format!("{p}.conv2"), 3, half, half, rng);
                    init_conv_bn(store, &format!("{p}.conv3"), 3, half, quarter, rng);
                }
                init_conv_bias(store, "dec.mla.cls", 1, self.streams * quarter, k, rng);
            }
        }
    }
}

/// Layers `{L_e/M, 2·L_e/M, …, L_e}` feeding the MLA streams.
pub fn mla_layers(depth: usize, streams: usize) -> Result<Vec<usize>> {
    if streams == 0 || !depth.is_multiple_of(streams) {
        return Err(invalid(format!("encoder depth {depth} is not divisible by {streams} MLA streams")));
    }
    let step = depth / streams;
    Ok((1..=streams).map(|i| i * step).collect())
}

/// `[N, L, C]` → `[N, gh, gw, C]`, row-major over the grid.
pub fn sequence_to_map(tape: &mut Tape, z: Var, gh: usize, gw: usize) -> Result<Var> {
    match *tape.shape(z) {
        [n, l, c] if l == gh * gw => tape.reshape(z, &[n, gh, gw, c]),
        _ => Err(Error::Shape { op: "sequence_to_map", lhs: tape.shape(z).to_vec(), rhs: vec![gh, gw] }),
    }
}

/// `[N, gh, gw, C]` → `[N, gh·gw, C]`.
pub fn map_to_sequence(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [n, h, w, c] => tape.reshape(x, &[n, h * w, c]),
        _ => Err(invalid(format!("expected an NHWC map, got {:?}", tape.shape(x)))),
    }
}

/// Decoder logits plus the intermediate maps the visualizer renders.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[N, H, W, K]`.
    pub logits: Var,
    /// Maps right after each bilinear upsampling, in order.
    pub upsampled: Vec<Var>,
    /// Number of bilinear interpolations applied.
    pub upsample_ops: usize,
}

/// Full-resolution target of a decoder: `(H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputSize {
    pub gh: usize,
    pub gw: usize,
    pub h: usize,
    pub w: usize,
}

/// 1×1 conv + BN + ReLU to `width`, 1×1 conv to K, one bilinear upsample.
pub fn naive_decode(g: &mut Graph, z_last: Var, size: OutputSize) -> Result<DecoderOutput> {
    let x = sequence_to_map(&mut g.tape, z_last, size.gh, size.gw)?;
    let x = g.conv_bn_relu("dec.naive.block", x, 0)?;
    let x = g.conv("dec.naive.cls", x, 0)?;
    let logits = g.tape.bilinear_resize(x, size.h, size.w)?;
    Ok(DecoderOutput { logits, upsampled: vec![logits], upsample_ops: 1 })
}

/// Four stages of 3×3 conv + BN + ReLU followed by 2× bilinear, then a 1×1
/// classifier at full resolution.
pub fn pup_decode(g: &mut Graph, z_last: Var, size: OutputSize) -> Result<DecoderOutput> {
    let (mut h, mut w) = (size.gh, size.gw);
    if (h << PUP_STAGES, w << PUP_STAGES) != (size.h, size.w) {
        return Err(invalid(format!(
            "PUP reaches {}x{} from a {h}x{w} grid but the input is {}x{}",
            h << PUP_STAGES,
            w << PUP_STAGES,
            size.h,
            size.w
        )));
    }
    let mut x = sequence_to_map(&mut g.tape, z_last, h, w)?;
    let mut upsampled = Vec::with_capacity(PUP_STAGES);
    for s in 1..=PUP_STAGES {
        x = g.conv_bn_relu(&format!("dec.pup.stage{s}"), x, 1)?;
        h *= 2;
        w *= 2;
        x = g.tape.bilinear_resize(x, h, w)?;
        upsampled.push(x);
    }
    assert_eq!(upsampled.len(), PUP_STAGES, "PUP must upsample exactly {PUP_STAGES} times");
    let logits = g.conv("dec.pup.cls", x, 0)?;
    Ok(DecoderOutput { logits, upsampled, upsample_ops: PUP_STAGES })
}

/// Multi-level aggregation over `streams` evenly spaced encoder layers.
pub fn mla_decode(
    g: &mut Graph,
    features: &EncoderFeatures,
    streams: usize,
    size: OutputSize,
) -> Result<DecoderOutput> {
    let layers = mla_layers(features.layers.len(), streams)?;
    let mut reduced = Vec::with_capacity(streams);
    for (s, &l) in layers.iter().enumerate() {
        let x = sequence_to_map(&mut g.tape, features.layer(l)?, size.gh, size.gw)?;
        reduced.push(g.conv_bn_relu(&format!("dec.mla.s{}.reduce", s + 1), x, 0)?);
    }
    // Top-down: the deepest stream is added into every shallower one.
    for s in (0..streams - 1).rev() {
        reduced[s] = g.tape.add(reduced[s], reduced[s + 1])?;
    }
    let (uh, uw) = (size.gh * 4, size.gw * 4);
    let mut outs = Vec::with_capacity(streams);
    let mut upsampled = Vec::with_capacity(streams + 1);
    for (s, x) in reduced.into_iter().enumerate() {
        let p = format!("dec.mla.s{}", s + 1);
        let x = g.conv_bn_relu(&format!("{p}.fuse"), x, 1)?;
        let x = g.conv_bn_relu(&format!("{p}.conv2"), x, 1)?;
        let x = g.conv_bn_relu(&format!("{p}.conv3"), x, 1)?;
        let x = g.tape.bilinear_resize(x, uh, uw)?;
        upsampled.push(x);
        outs.push(x);
    }
    let cat = g.tape.concat_channels(&outs)?;
    let x = g.conv("dec.mla.cls", cat, 0)?;
    let logits = g.tape.bilinear_resize(x, size.h, size.w)?;
    upsampled.push(logits);
    Ok(DecoderOutput { logits, upsampled, upsample_ops: streams + 1 })
}

/// Parameter prefix of the auxiliary head on layer `l`.
pub fn aux_prefix(l: usize) -> String {
    format!("aux.l{l}")
}

pub fn init_aux_head<R: Rng>(
    store: &mut ParamStore,
    l: usize,
    hidden: usize,
    width: usize,
    classes: usize,
    rng: &mut R,
) {
    let p = aux_prefix(l);
    init_conv_bn(store, &format!("{p}.block"), 1, hidden, width, rng);
    init_conv_bias(store, &format!("{p}.cls"), 1, width, classes, rng);
}

/// Two-layer auxiliary head on `Z^l`, upsampled to full resolution.
pub fn aux_decode(g: &mut Graph, l: usize, z: Var, size: OutputSize) -> Result<Var> {
    let p = aux_prefix(l);
    let x = sequence_to_map(&mut g.tape, z, size.gh, size.gw)?;
    let x = g.conv_bn_relu(&format!("{p}.block"), x, 0)?;
    let x = g.conv(&format!("{p}.cls"), x, 0)?;
    g.tape.bilinear_resize(x, size.h, size.w)
}
