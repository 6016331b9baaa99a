//! Named parameter storage, forward-pass binding, initialization and the
//! checkpoint archive format.
//!
//! A checkpoint is a named-tensor archive: a little-endian `u32` count, then
//! per tensor a `u16` name length, the UTF-8 name and an `STTN` container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_sttn, write_sttn, BatchStats, SttnPayload, Tape, Tensor, Var};

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameters plus non-trainable buffers (running statistics,
/// metadata), both keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        tensor.set_requires_grad(true);
        self.params.insert(name.into(), tensor);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.buffers.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Folds a train-mode batch statistic into the running averages of `bn`.
    pub fn update_running_stats(&mut self, bn: &str, stats: &BatchStats) -> Result<()> {
        let (mk, vk) = running_names(bn);
        let c = stats.mean.len();
        let mean = self.buffers.entry(mk).or_insert_with(|| Tensor::zeros(&[c]));
        for (m, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = self.buffers.entry(vk).or_insert_with(|| Tensor::full(&[c], 1.0));
        for (v, &b) in var.data_mut().iter_mut().zip(&stats.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
        Ok(())
    }

    /// Replaces the running statistics of `bn`.
    pub fn set_running_stats(&mut self, bn: &str, mean: Vec<f32>, var: Vec<f32>) -> Result<()> {
        if mean.len() != var.len() {
            return Err(Error::Shape { op: "set_running_stats", lhs: vec![mean.len()], rhs: vec![var.len()] });
        }
        let (mk, vk) = running_names(bn);
        let c = mean.len();
        self.buffers.insert(mk, Tensor::new(&[c], mean)?);
        self.buffers.insert(vk, Tensor::new(&[c], var)?);
        Ok(())
    }

    pub fn running_stats(&self, bn: &str) -> Option<(&Tensor, &Tensor)> {
        let (mk, vk) = running_names(bn);
        Some((self.buffers.get(&mk)?, self.buffers.get(&vk)?))
    }

    // ------------------------------------------------------------ archive

    pub fn write_archive<W: Write>(&self, w: &mut W) -> Result<()> {
        let entries: Vec<(&String, &Tensor)> = self.params.iter().chain(self.buffers.iter()).collect();
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in entries {
            let is_buffer = self.buffers.contains_key(name);
            let stored = if is_buffer { format!("{BUFFER_PREFIX}{name}") } else { name.clone() };
            let bytes = stored.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let mut plain = t.clone();
            plain.set_requires_grad(false);
            write_sttn(w, &SttnPayload::F32(plain))?;
        }
        Ok(())
    }

    pub fn read_archive<R: Read>(r: &mut R) -> Result<Self> {
        let mut count = [0u8; 4];
        read_exact(r, &mut count)?;
        let count = u32::from_le_bytes(count);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let tensor = read_sttn(r)?.into_f32()?;
            match name.strip_prefix(BUFFER_PREFIX) {
                Some(buf) => store.insert_buffer(buf, tensor),
                None => store.insert(name, tensor),
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_archive(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_archive(&mut bytes.as_slice())
    }
}

const BUFFER_PREFIX: &str = "buf:";

fn running_names(bn: &str) -> (String, String) {
    (format!("{bn}.running_mean"), format!("{bn}.running_var"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated checkpoint archive".into()),
        _ => Error::Io(e),
    })
}

// ------------------------------------------------------------------ init

/// Normal samples truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// He-normal initialization for a `k×k×cin×cout` kernel.
pub fn kaiming_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let std = (2.0 / fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

// ----------------------------------------------------------------- graph

/// One forward pass: a tape plus lazily bound parameters.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<(String, BatchStats)>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self { tape: Tape::new(), store, bound: BTreeMap::new(), mode, bn_updates: Vec::new(), rng: None }
    }

    /// Seeds the generator used for dropout masks.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Inverted dropout in train mode; the identity in eval mode or at `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        let rng = self.rng.as_mut().ok_or_else(|| Error::InvalidArgument("dropout needs a seeded graph".into()))?;
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(self.tape.shape(x), |_| if rng.random::<f32>() < p { 0.0 } else { keep });
        let mask = self.tape.constant(mask);
        self.tape.mul(x, mask)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Binds (once) and returns the tape variable of parameter `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.param(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · W + b` with parameters `{prefix}.w` and, when present, `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.b");
        if self.store.contains(&bias) {
            let b = self.param(&bias)?;
            return self.tape.add_broadcast(y, b);
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, 1e-6)
    }

    /// Convolution with kernel `{prefix}.w` and optional bias `{prefix}.b`.
    pub fn conv(&mut self, prefix: &str, x: Var, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.conv2d(x, w, 1, padding)?;
        let bias = format!("{prefix}.b");
        if self.store.contains(&bias) {
            let b = self.param(&bias)?;
            return self.tape.add_broadcast(y, b);
        }
        Ok(y)
    }

    /// Batch norm `{prefix}.g/.b`, using batch statistics in train mode and
    /// the stored running statistics in eval mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) =
                    self.store.running_stats(prefix).ok_or_else(|| Error::UninitializedStats(prefix.to_string()))?;
                self.tape.batch_norm_eval(x, g, b, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    /// Conv (no bias) → batch norm → ReLU.
    pub fn conv_bn_relu(&mut self, prefix: &str, x: Var, padding: usize) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, padding)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), y)?;
        self.tape.relu(y)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Batch statistics recorded by train-mode batch norms, in call order.
    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// parameter, keyed by name.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Vec<f32>>> {
        self.tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &v) in &self.bound {
            let g = match self.tape.grad(v) {
                Some(g) => g.into_data(),
                None => vec![0.0; self.tape.value(v).numel()],
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }
}

/// Registers the parameters of a conv → BN block.
pub fn init_conv_bn<R: Rng>(store: &mut ParamStore, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut R) {
    store.insert(format!("{prefix}.conv.w"), kaiming_normal(&[k, k, cin, cout], rng));
    init_norm(store, &format!("{prefix}.bn"), cout);
}

/// Registers a classifier conv with bias.
pub fn init_conv_bias<R: Rng>(store: &mut ParamStore, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), trunc_normal(&[k, k, cin, cout], 0.02, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Registers a normalization affine pair `(g, b) = (1, 0)`.
pub fn init_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[c], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
}
