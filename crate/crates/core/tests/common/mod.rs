//! Shared test oracles. Nothing here calls into the gradient machinery under
//! test except to evaluate forward values.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seq2seg::eval::Sample;
use seq2seg::model::{ForwardOptions, Setr};
use seq2seg::params::{Graph, Mode};
use seq2seg::training::{total_loss, TrainConfig};
use seq2seg::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Relative error with a small denominator floor so exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite difference of a scalar function of several tensors with
/// respect to coordinate `coord` of input `which`.
pub fn central_diff<F>(f: &F, inputs: &[Tensor], which: usize, coord: usize, step: f32) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut plus = inputs.to_vec();
    let mut minus = inputs.to_vec();
    plus[which].data_mut()[coord] += step;
    minus[which].data_mut()[coord] -= step;
    let (hp, hm) = (
        plus[which].data()[coord] - inputs[which].data()[coord],
        inputs[which].data()[coord] - minus[which].data()[coord],
    );
    (f(&plus) - f(&minus)) / (hp + hm) as f64
}

/// Compares tape gradients of `build` against central differences on every
/// coordinate of every input. Returns the worst relative error.
pub fn grad_check<B>(build: B, inputs: &[Tensor], step: f32, floor: f64) -> f64
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out).data()[0] as f64
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for c in 0..inputs[i].numel() {
            let n = central_diff(&eval, inputs, i, c, step);
            worst = worst.max(rel_err(g.data()[c] as f64, n, floor));
        }
    }
    worst
}

/// One sampled parameter coordinate of a model-level gradient check.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Mean cross-entropy of `[.., K]` logits in f64, skipping `ignore` labels.
pub fn cross_entropy_f64(logits: &[f32], labels: &[u16], k: usize, ignore: u16) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (px, &l) in logits.chunks(k).zip(labels) {
        if l == ignore {
            continue;
        }
        let m = px.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + px.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        sum += lse - px[l as usize] as f64;
        n += 1;
    }
    sum / n as f64
}

/// Training loss of `model` from a forward in `mode`, with the
/// cross-entropy evaluated in f64 on the f32 logits.
pub fn forward_loss(model: &Setr, images: &Tensor, labels: &[u16], cfg: &TrainConfig, mode: Mode) -> f64 {
    forward_loss_pattern(model, images, labels, cfg, mode).0
}

/// [`forward_loss`] plus the ReLU activity pattern of the forward pass.
pub fn forward_loss_pattern(
    model: &Setr,
    images: &Tensor,
    labels: &[u16],
    cfg: &TrainConfig,
    mode: Mode,
) -> (f64, Vec<bool>) {
    let mut g = Graph::new(&model.store, mode);
    let out = model.forward(&mut g, images, ForwardOptions { aux: true, keep_attention: false }).expect("forward");
    let k = model.classes();
    let ce = |v: Var| cross_entropy_f64(g.tape.value(v).data(), labels, k, cfg.ignore_index);
    let loss = ce(out.logits) + cfg.aux_weight as f64 * out.aux.iter().map(|&(_, v)| ce(v)).sum::<f64>();
    (loss, g.tape.relu_pattern())
}

/// Random two-image batch with labels in `0..classes` plus a few ignored pixels.
pub fn random_batch(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> Vec<Sample> {
    (0..2)
        .map(|_| Sample {
            image: Tensor::from_fn(&[h, w, 3], |_| rng.random_range(-1.5f32..1.5)),
            labels: (0..h * w)
                .map(|_| if rng.random_range(0..20) == 0 { 255 } else { rng.random_range(0..classes as u16) })
                .collect(),
        })
        .collect()
}

pub fn stack_batch(batch: &[Sample]) -> (Tensor, Vec<u16>) {
    let (h, w) = batch[0].size();
    let images =
        Tensor::new(&[batch.len(), h, w, 3], batch.iter().flat_map(|s| s.image.data().iter().copied()).collect())
            .unwrap();
    (images, batch.iter().flat_map(|s| s.labels.iter().copied()).collect())
}

/// Sets every batch-norm layer's running statistics to the statistics of
/// one train-mode pass over `batch`.
pub fn calibrate(model: &mut Setr, batch: &[Sample]) {
    let (images, _) = stack_batch(batch);
    let mut g = Graph::new(&model.store, Mode::Train);
    model.forward(&mut g, &images, ForwardOptions { aux: true, keep_attention: false }).expect("forward");
    let stats = g.bn_updates().to_vec();
    drop(g);
    for (name, st) in stats {
        model.store.set_running_stats(&name, st.mean, st.var).unwrap();
    }
}

/// Outcome of a sampled model-level gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Coordinates redrawn because the difference stencil crossed a ReLU kink.
    pub redrawn: usize,
}

/// Analytic gradients of the training loss in `mode` against central
/// differences of step `step`: `per_tensor` coordinates from every parameter
/// tensor, topped up with uniformly drawn extras to at least `count`.
///
/// A central difference is only an oracle where the loss is differentiable
/// across the whole stencil, so a coordinate whose `±step` forwards disagree
/// on any ReLU's activity is replaced by a fresh draw from the same tensor.
/// The decision uses forward values only.
pub fn model_gradient_samples(
    model: &Setr,
    batch: &[Sample],
    mode: Mode,
    per_tensor: usize,
    count: usize,
    step: f32,
    seed: u64,
) -> GradCheck {
    let cfg = TrainConfig::default();
    let (images, labels) = stack_batch(batch);
    let grads = {
        let mut g = Graph::new(&model.store, mode);
        let out = model.forward(&mut g, &images, ForwardOptions { aux: true, keep_attention: false }).expect("forward");
        let aux: Vec<Var> = out.aux.iter().map(|&(_, v)| v).collect();
        let loss = total_loss(&mut g.tape, out.logits, &aux, &labels, cfg.aux_weight, cfg.ignore_index).expect("loss");
        g.backward(loss).expect("backward")
    };
    let mut r = rng(seed);
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    let numel = |n: &str| model.store.get(n).unwrap().numel();
    let mut tensors = Vec::new();
    for n in &names {
        tensors.extend(std::iter::repeat_n(n.clone(), per_tensor));
    }
    while tensors.len() < count {
        tensors.push(names[r.random_range(0..names.len())].clone());
    }
    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(tensors.len());
    let mut redrawn = 0;
    for name in tensors {
        for _attempt in 0..50 {
            let index = r.random_range(0..numel(&name));
            let original = model.store.get(&name).unwrap().data()[index];
            let mut at = |v: f32| {
                probe.store.get_mut(&name).unwrap().data_mut()[index] = v;
                forward_loss_pattern(&probe, &images, &labels, &cfg, mode)
            };
            let (hi, lo) = (original + step, original - step);
            let ((up, up_relu), (down, down_relu)) = (at(hi), at(lo));
            probe.store.get_mut(&name).unwrap().data_mut()[index] = original;
            if up_relu != down_relu {
                redrawn += 1;
                continue;
            }
            let analytic = grads.get(&name).map_or(0.0, |g| g[index] as f64);
            samples.push(GradSample { name, index, analytic, numeric: (up - down) / (hi - lo) as f64 });
            break;
        }
    }
    GradCheck { samples, redrawn }
}
