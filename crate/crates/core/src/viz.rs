//! Diagnostics rendered as 8-bit images: per-layer features, attention maps
//! for chosen points, attention rollout and position-embedding similarity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::write_pgm;
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, Setr};
use crate::params::{Graph, Mode};
use crate::sequentializer::PositionEmbedding;
use crate::tensor::Tensor;

const ROW_TOLERANCE: f64 = 1e-5;

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> GrayImage {
        let f = factor.max(1);
        let (h, w) = (self.height * f, self.width * f);
        let pixels = (0..h * w).map(|i| self.pixels[(i / w / f) * self.width + (i % w) / f]).collect();
        GrayImage { height: h, width: w, pixels }
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }

    /// Writes the image as binary PGM.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_pgm(file, self.width, self.height, &self.pixels)
    }
}

/// Maps values linearly onto `[0, 255]`; a constant input renders as 128.
pub fn min_max_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

fn gray(height: usize, width: usize, values: &[f64]) -> GrayImage {
    GrayImage { height, width, pixels: min_max_u8(values) }
}

/// Per-layer `[heads, L, L]` attention of one image.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    layers: Vec<Tensor>,
}

impl AttentionStack {
    /// Validates shapes and that every row is a distribution.
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("attention stack has no layers"));
        }
        let shape = layers[0].shape().to_vec();
        for (l, a) in layers.iter().enumerate() {
            if a.rank() != 3 || a.shape()[1] != a.shape()[2] || a.shape() != &shape[..] {
                return Err(Error::Shape { op: "attention_stack", lhs: shape.clone(), rhs: a.shape().to_vec() });
            }
            let len = a.shape()[2];
            for (r, row) in a.data().chunks(len).enumerate() {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > ROW_TOLERANCE {
                    return Err(invalid(format!("layer {} row {r} sums to {s}", l + 1)));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].shape()[1]
    }

    /// Raw attention of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> Result<&Tensor> {
        l.checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| invalid(format!("layer {l} outside 1..={}", self.layers.len())))
    }

    /// Head-averaged `L×L` attention of layer `l` (1-based).
    pub fn head_average(&self, l: usize) -> Result<Vec<f64>> {
        let a = self.layer(l)?;
        let n = self.tokens() * self.tokens();
        let mut avg = vec![0.0f64; n];
        for head in a.data().chunks(n) {
            for (acc, &v) in avg.iter_mut().zip(head) {
                *acc += v as f64;
            }
        }
        let m = self.heads() as f64;
        avg.iter_mut().for_each(|v| *v /= m);
        Ok(avg)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Cumulative rollout after each layer: stage `l` is
/// `norm((Ā_l + I)/2) · … · norm((Ā_1 + I)/2)`.
pub fn rollout_stages(stack: &AttentionStack) -> Result<Vec<Tensor>> {
    let n = stack.tokens();
    let mut stages = Vec::with_capacity(stack.depth());
    let mut acc: Option<Vec<f64>> = None;
    for l in 1..=stack.depth() {
        let mut a = stack.head_average(l)?;
        for i in 0..n {
            a[i * n + i] += 1.0;
            let row = &mut a[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let next = match &acc {
            None => a,
            Some(prev) => matmul(&a, prev, n),
        };
        stages.push(Tensor::new(&[n, n], next.iter().map(|&v| v as f32).collect())?);
        acc = Some(next);
    }
    Ok(stages)
}

/// Rollout through every layer of the stack.
pub fn attention_rollout(stack: &AttentionStack) -> Result<Tensor> {
    Ok(rollout_stages(stack)?.pop().expect("stack is non-empty"))
}

fn point_index(point: (usize, usize), grid: (usize, usize), tokens: usize) -> Result<usize> {
    if grid.0 * grid.1 != tokens {
        return Err(invalid(format!("grid {}x{} does not hold {tokens} tokens", grid.0, grid.1)));
    }
    if point.0 >= grid.0 || point.1 >= grid.1 {
        return Err(invalid(format!("point ({}, {}) outside the {}x{} grid", point.0, point.1, grid.0, grid.1)));
    }
    Ok(point.0 * grid.1 + point.1)
}

/// Head-averaged attention row of `point` at `layer`, as a grid image.
pub fn point_attention_map(
    stack: &AttentionStack,
    layer: usize,
    point: (usize, usize),
    grid: (usize, usize),
) -> Result<GrayImage> {
    let n = stack.tokens();
    let q = point_index(point, grid, n)?;
    let avg = stack.head_average(layer)?;
    Ok(gray(grid.0, grid.1, &avg[q * n..(q + 1) * n]))
}

/// Rollout row of `point` as a grid image.
pub fn rollout_point_map(rollout: &Tensor, point: (usize, usize), grid: (usize, usize)) -> Result<GrayImage> {
    let n = rollout.shape()[0];
    let q = point_index(point, grid, n)?;
    let row: Vec<f64> = rollout.data()[q * n..(q + 1) * n].iter().map(|&v| v as f64).collect();
    Ok(gray(grid.0, grid.1, &row))
}

/// Cosine similarity between every pair of position embeddings, `L×L`.
/// Pairs involving a zero-norm embedding have similarity 0.
pub fn pos_similarity(pos: &PositionEmbedding) -> Vec<f64> {
    let c = pos.channels();
    let rows: Vec<&[f32]> = pos.table.data().chunks(c).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).collect();
    let n = rows.len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
                sim[i * n + j] = dot / (norms[i] * norms[j]);
            }
        }
    }
    sim
}

/// `gh×gw` tiles, each a `gh×gw` image; tile `(r, c)` holds the similarity
/// of embedding `(r, c)` to all others, min-max normalized per tile.
pub fn pos_embed_similarity(pos: &PositionEmbedding) -> GrayImage {
    let (gh, gw) = (pos.gh, pos.gw);
    let n = gh * gw;
    let sim = pos_similarity(pos);
    let (height, width) = (gh * gh, gw * gw);
    let mut pixels = vec![0u8; height * width];
    for q in 0..n {
        let tile = min_max_u8(&sim[q * n..(q + 1) * n]);
        let (tr, tc) = (q / gw, q % gw);
        for (k, &v) in tile.iter().enumerate() {
            let (r, c) = (tr * gh + k / gw, tc * gw + k % gw);
            pixels[r * width + c] = v;
        }
    }
    GrayImage { height, width, pixels }
}

/// Channel reduction applied before rendering a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Projection onto the first principal component of the channels.
    Pca1,
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "pca1" => Ok(Self::Pca1),
            _ => Err(invalid(format!("unknown reduction `{s}` (mean|pca1)"))),
        }
    }
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration, with
/// its largest-magnitude component made positive.
fn leading_eigenvector(cov: &[f64], n: usize) -> Vec<f64> {
    // Start from the heaviest column so the start is never orthogonal to a
    // nonzero spectrum.
    let start = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = (0..n).map(|i| cov[i * n + a].powi(2)).sum();
            let nb: f64 = (0..n).map(|i| cov[i * n + b].powi(2)).sum();
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..n).map(|i| cov[i * n + start]).collect();
    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..10_000 {
        let mut next: Vec<f64> = (0..n).map(|i| (0..n).map(|j| cov[i * n + j] * v[j]).sum()).collect();
        norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Per-pixel values of an `[H, W, C]` map after channel reduction.
pub fn reduce_channels(map: &Tensor, reduction: Reduction) -> Result<Vec<f64>> {
    if map.rank() != 3 {
        return Err(invalid(format!("expected an [H, W, C] map, got {:?}", map.shape())));
    }
    let c = map.shape()[2];
    let pixels: Vec<&[f32]> = map.data().chunks(c).collect();
    match reduction {
        Reduction::Mean => Ok(pixels.iter().map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect()),
        Reduction::Pca1 => {
            let count = pixels.len() as f64;
            let mut mean = vec![0.0; c];
            for p in &pixels {
                for (m, &v) in mean.iter_mut().zip(*p) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let centered: Vec<Vec<f64>> =
                pixels.iter().map(|p| p.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect()).collect();
            let mut cov = vec![0.0; c * c];
            for x in &centered {
                for i in 0..c {
                    for j in 0..c {
                        cov[i * c + j] += x[i] * x[j];
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= count);
            let v = leading_eigenvector(&cov, c);
            Ok(centered.iter().map(|x| x.iter().zip(&v).map(|(a, b)| a * b).sum()).collect())
        }
    }
}

/// Channel reduction followed by min-max normalization.
pub fn render_feature(map: &Tensor, reduction: Reduction) -> Result<GrayImage> {
    let values = reduce_channels(map, reduction)?;
    Ok(gray(map.shape()[0], map.shape()[1], &values))
}

/// Which captured map to render: encoder output `Z^l` or decoder map `U^k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRef {
    Z(usize),
    U(usize),
}

impl FromStr for FeatureRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("feature `{s}` is not zN or uN"));
        let (kind, n) = s.split_at_checked(1).ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        match kind {
            "z" | "Z" => Ok(Self::Z(n)),
            "u" | "U" => Ok(Self::U(n)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Z(n) => write!(f, "z{n}"),
            Self::U(n) => write!(f, "u{n}"),
        }
    }
}

/// Everything the visualizer reads from one eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct Capture {
    pub grid: (usize, usize),
    pub attention: AttentionStack,
    /// Encoder outputs as `[gh, gw, C]` maps.
    pub z: Vec<Tensor>,
    /// Decoder maps after each upsampling, ending with the logits.
    pub u: Vec<Tensor>,
}

impl Capture {
    pub fn feature(&self, which: FeatureRef) -> Result<&Tensor> {
        let (list, n) = match which {
            FeatureRef::Z(n) => (&self.z, n),
            FeatureRef::U(n) => (&self.u, n),
        };
        n.checked_sub(1).and_then(|i| list.get(i)).ok_or_else(|| invalid(format!("{which} outside 1..={}", list.len())))
    }
}

/// Runs `model` on one normalized `[H, W, 3]` image and keeps its features.
pub fn capture(model: &Setr, image: &Tensor) -> Result<Capture> {
    crate::sequentializer::check_image(image, model.config.patch)?;
    let [h, w, _] = image.shape()[..] else { unreachable!() };
    let p = model.config.patch;
    let grid = (h / p, w / p);
    let batch = image.clone().reshape(&[1, h, w, 3])?;
    let mut g = Graph::new(&model.store, Mode::Eval);
    let out = model.forward(&mut g, &batch, ForwardOptions { aux: false, keep_attention: true })?;
    let layers = out.features.attention.clone().unwrap_or_default();
    let attention = AttentionStack::new(
        layers
            .into_iter()
            .map(|a| {
                let s = a.shape().to_vec();
                let per_image = s[1] * s[2] * s[3];
                Tensor::new(&s[1..], a.data()[..per_image].to_vec())
            })
            .collect::<Result<_>>()?,
    )?;
    let c = model.config.encoder.hidden;
    let z = out
        .features
        .layers
        .iter()
        .map(|&v| g.tape.value(v).clone().reshape(&[grid.0, grid.1, c]))
        .collect::<Result<_>>()?;
    let mut u_vars = out.decoder.upsampled.clone();
    if u_vars.last() != Some(&out.logits) {
        u_vars.push(out.logits);
    }
    let u = u_vars
        .iter()
        .map(|&v| {
            let s = g.tape.shape(v).to_vec();
            g.tape.value(v).clone().reshape(&s[1..])
        })
        .collect::<Result<_>>()?;
    Ok(Capture { grid, attention, z, u })
}
