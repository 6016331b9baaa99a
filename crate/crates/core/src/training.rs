//! Loss assembly with auxiliary heads, SGD with momentum, the polynomial
//! schedule, augmentation and the training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::eval::{compute_miou, evaluate, MultiScaleConfig, Sample};
use crate::model::{ForwardOptions, Setr};
use crate::params::{Graph, Mode, ParamStore};
use crate::tensor::{bilinear_forward, Tape, Tensor, Var};

pub const IGNORE_INDEX: u16 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub total_iters: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub poly_power: f32,
    pub aux_weight: f32,
    pub seed: u64,
    /// Random resize, crop and flip. When off, images are used as stored.
    pub augment: bool,
    pub scale_range: (f32, f32),
    /// Evaluate mIoU every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Replace the batch-norm running averages with population statistics
    /// of the training set once training ends.
    pub precise_bn: bool,
    pub ignore_index: u16,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            total_iters: 1000,
            batch_size: 2,
            crop_size: 64,
            poly_power: 0.9,
            aux_weight: 0.4,
            seed: 0,
            augment: true,
            scale_range: (0.5, 2.0),
            eval_every: 0,
            precise_bn: true,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(invalid("total_iters, batch_size and crop_size must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(self.poly_power >= 0.0) || !(self.aux_weight >= 0.0) {
            return Err(invalid("base_lr, poly_power and aux_weight must be nonnegative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid(format!("scale range {lo}..{hi} is empty")));
        }
        Ok(())
    }
}

/// `base_lr · (1 − t/T)^power`.
pub fn poly_lr(base_lr: f32, t: usize, total: usize, power: f32) -> Result<f32> {
    if t > total || total == 0 {
        return Err(invalid(format!("iteration {t} outside 0..={total}")));
    }
    Ok((base_lr as f64 * (1.0 - t as f64 / total as f64).powf(power as f64)) as f32)
}

/// SGD with momentum: `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
    pub steps: usize,
}

impl SgdMomentum {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, ..Self::default() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, lr: f32) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if g.len() != p.numel() {
                return Err(Error::Shape { op: "sgd_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, &gi), pi) in v.iter_mut().zip(g).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// `CE(main) + aux_weight · Σ CE(aux_i)`.
pub fn total_loss(
    tape: &mut Tape,
    main: Var,
    aux: &[Var],
    labels: &[u16],
    aux_weight: f32,
    ignore: u16,
) -> Result<Var> {
    let mut loss = tape.cross_entropy(main, labels, ignore)?;
    if aux_weight == 0.0 {
        return Ok(loss);
    }
    for &a in aux {
        let ce = tape.cross_entropy(a, labels, ignore)?;
        let ce = tape.scale(ce, aux_weight)?;
        loss = tape.add(loss, ce)?;
    }
    Ok(loss)
}

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub ratio: f32,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Draws ratio, crop offset and flip, in that order.
pub fn sample_augment<R: Rng>(rng: &mut R, h: usize, w: usize, crop: usize, range: (f32, f32)) -> AugmentParams {
    let ratio = if range.0 == range.1 { range.0 } else { rng.random_range(range.0..=range.1) };
    let (rh, rw) = scaled_dims(h, w, ratio);
    let top = rng.random_range(0..=rh.saturating_sub(crop));
    let left = rng.random_range(0..=rw.saturating_sub(crop));
    let flip = rng.random_bool(0.5);
    AugmentParams { ratio, top, left, flip }
}

fn scaled_dims(h: usize, w: usize, ratio: f32) -> (usize, usize) {
    let s = |x: usize| ((x as f64 * ratio as f64).round() as usize).max(1);
    (s(h), s(w))
}

/// Align-corners nearest-neighbour source index.
fn nearest(i: usize, src: usize, dst: usize) -> usize {
    if dst == 1 || src == 1 {
        return 0;
    }
    ((i as f64 * (src - 1) as f64 / (dst - 1) as f64).round() as usize).min(src - 1)
}

/// Resizes (bilinear image, nearest labels), crops `crop×crop` padding with
/// zeros / `ignore`, and optionally mirrors.
pub fn apply_augment(sample: &Sample, p: AugmentParams, crop: usize, ignore: u16) -> Result<Sample> {
    let (h, w) = sample.size();
    if sample.labels.len() != h * w {
        return Err(Error::Shape { op: "augment", lhs: vec![h, w], rhs: vec![sample.labels.len()] });
    }
    let (rh, rw) = scaled_dims(h, w, p.ratio);
    let img = if (rh, rw) == (h, w) {
        sample.image.data().to_vec()
    } else {
        bilinear_forward(sample.image.data(), 1, h, w, 3, rh, rw)
    };
    let ys: Vec<usize> = (0..rh).map(|y| nearest(y, h, rh)).collect();
    let xs: Vec<usize> = (0..rw).map(|x| nearest(x, w, rw)).collect();
    let mut out_img = vec![0.0f32; crop * crop * 3];
    let mut out_lab = vec![ignore; crop * crop];
    for cy in 0..crop {
        let y = p.top + cy;
        if y >= rh {
            break;
        }
        for cx in 0..crop {
            let x = p.left + cx;
            if x >= rw {
                break;
            }
            let dx = if p.flip { crop - 1 - cx } else { cx };
            let dst = cy * crop + dx;
            out_img[dst * 3..dst * 3 + 3].copy_from_slice(&img[(y * rw + x) * 3..(y * rw + x) * 3 + 3]);
            out_lab[dst] = sample.labels[ys[y] * w + xs[x]];
        }
    }
    Ok(Sample { image: Tensor::new(&[crop, crop, 3], out_img)?, labels: out_lab })
}

pub fn augment<R: Rng>(sample: &Sample, cfg: &TrainConfig, rng: &mut R) -> Result<Sample> {
    let (h, w) = sample.size();
    let p = sample_augment(rng, h, w, cfg.crop_size, cfg.scale_range);
    apply_augment(sample, p, cfg.crop_size, cfg.ignore_index)
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f32,
    pub loss: f32,
    pub miou: Option<f64>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let miou = self.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!("{},{:.8},{:.6},{}", self.iter, self.lr, self.loss, miou)
    }
}

pub const LOG_HEADER: &str = "iter,lr,loss,miou";

/// Per-channel mean and standard deviation of 8-bit RGB images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a [u8]>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0u64;
    for img in images {
        for px in img.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let std: Vec<f32> = (0..3).map(|c| ((sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1.0)) as f32).collect();
    (mean.map(|m| m as f32), [std[0], std[1], std[2]])
}

/// Optimizes `model` on `train` for `cfg.total_iters` steps, writing one CSV
/// row per iteration to `log`. mIoU is measured on `val` by whole-image
/// single-scale inference every `eval_every` iterations and at the end.
pub fn train_loop<W: Write>(
    model: &mut Setr,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    log: &mut W,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if !cfg.augment {
        let first = train[0].size();
        if train.iter().any(|s| s.size() != first) {
            return Err(invalid("without augmentation all training images must share one size"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.total_iters);
    writeln!(log, "{LOG_HEADER}")?;
    for t in 0..cfg.total_iters {
        let lr = poly_lr(cfg.base_lr, t, cfg.total_iters, cfg.poly_power)?;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).rev().collect();
                order.shuffle(&mut rng);
            }
            let s = &train[order.pop().unwrap()];
            batch.push(if cfg.augment { augment(s, cfg, &mut rng)? } else { s.clone() });
        }
        let dropout_seed = rng.random::<u64>();
        let (loss, grads, bn) = train_step(model, &batch, cfg, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        opt.step(&mut model.store, &grads, lr)?;
        for (name, stats) in &bn {
            model.store.update_running_stats(name, stats)?;
        }
        let done = t + 1;
        if done == cfg.total_iters && cfg.precise_bn {
            recalibrate_batch_norm(model, train, cfg.batch_size)?;
        }
        let eval_now = done == cfg.total_iters || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let miou = if eval_now && !val.is_empty() {
            let window = val.iter().map(|s| s.size().0.max(s.size().1)).max().unwrap().next_multiple_of(16);
            let cm = evaluate(&*model, val, &MultiScaleConfig::single(window), cfg.ignore_index)?;
            Some(compute_miou(&cm).miou)
        } else {
            None
        };
        let row = LogRow { iter: done, lr, loss, miou };
        writeln!(log, "{}", row.csv())?;
        rows.push(row);
    }
    Ok(rows)
}

/// Recomputes every batch-norm layer's running statistics as population
/// statistics over `samples`, using train-mode forwards on consecutive
/// batches of equally sized images.
///
/// Means and second moments are pooled across batches, so the variance
/// includes the spread between batch means that running averages miss.
pub fn recalibrate_batch_norm(model: &mut Setr, samples: &[Sample], batch_size: usize) -> Result<()> {
    let mut pooled: BTreeMap<String, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut start = 0;
    while start < samples.len() {
        let size = samples[start].size();
        let mut end = start + 1;
        while end < samples.len() && end - start < batch_size && samples[end].size() == size {
            end += 1;
        }
        let (h, w) = size;
        let data: Vec<f32> = samples[start..end].iter().flat_map(|s| s.image.data().iter().copied()).collect();
        let images = Tensor::new(&[end - start, h, w, 3], data)?;
        let mut g = Graph::new(&model.store, Mode::Train);
        model.forward(&mut g, &images, ForwardOptions { aux: true, keep_attention: false })?;
        for (name, st) in g.bn_updates() {
            let n = st.count as f64;
            let entry =
                pooled.entry(name.clone()).or_insert_with(|| (0.0, vec![0.0; st.mean.len()], vec![0.0; st.mean.len()]));
            entry.0 += n;
            let biased = if st.count > 1 { (n - 1.0) / n } else { 1.0 };
            for (c, (&m, &v)) in st.mean.iter().zip(&st.var).enumerate() {
                let (m, v) = (m as f64, v as f64 * biased);
                entry.1[c] += n * m;
                entry.2[c] += n * (v + m * m);
            }
        }
        start = end;
    }
    for (name, (n, s1, s2)) in pooled {
        let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let var = s2.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0) * unbiased) as f32).collect();
        model.store.set_running_stats(&name, mean.iter().map(|&m| m as f32).collect(), var)?;
    }
    Ok(())
}

type StepResult = (f32, BTreeMap<String, Vec<f32>>, Vec<(String, crate::tensor::BatchStats)>);

/// Forward and backward on one batch; returns loss, gradients and batch-norm statistics.
pub fn train_step(model: &Setr, batch: &[Sample], cfg: &TrainConfig, dropout_seed: u64) -> Result<StepResult> {
    let (h, w) = batch[0].size();
    let mut data = Vec::with_capacity(batch.len() * h * w * 3);
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        if s.size() != (h, w) {
            return Err(invalid("batch images differ in size"));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let images = Tensor::new(&[batch.len(), h, w, 3], data)?;
    let mut g = Graph::new(&model.store, Mode::Train).with_seed(dropout_seed);
    let use_aux = cfg.aux_weight > 0.0;
    let out = model.forward(&mut g, &images, ForwardOptions { aux: use_aux, keep_attention: false })?;
    let aux: Vec<Var> = out.aux.iter().map(|&(_, v)| v).collect();
    let loss = total_loss(&mut g.tape, out.logits, &aux, &labels, cfg.aux_weight, cfg.ignore_index)?;
    let value = g.tape.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads, g.bn_updates().to_vec()))
}
