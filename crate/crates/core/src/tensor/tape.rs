use super::kernels::{self, gemm, ConvGeom, Transpose};
use super::{MapShape, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch mean and unbiased variance from a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Relu { a: Var },
    Gelu { a: Var },
    Reshape { a: Var },
    Transpose { a: Var },
    SliceLast { a: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    SliceFirst { a: Var, start: usize },
    ConcatFirst { parts: Vec<Var> },
    Softmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, cols: Option<Vec<f32>> },
    Bilinear { x: Var, from: MapShape },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<u16>, ignore: u16, count: usize },
    Sum { a: Var },
    Mean { a: Var },
    Patchify { x: Var, from: MapShape, patch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every operation checks its output for non-finite values and fails
/// immediately instead of letting NaN or Inf propagate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. It is differentiable when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Activity of every ReLU input in recording order, `true` where positive.
    /// Two forwards of one graph differ here exactly when a perturbation
    /// moved some unit across its kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                out.extend(self.data(a).iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- algebra

    /// Matrix product. `a` may have any rank ≥ 2; its leading axes are
    /// flattened into rows. `b` must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, self.data(a), Transpose::No, self.data(b), Transpose::No, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(&shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// `a · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::Shape { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let k = sb[1];
        let n = sb[0];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, self.data(a), Transpose::No, self.data(b), Transpose::Yes, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul_nt", Tensor::new(&shape, out)?, Op::MatMulNt { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape { op: "add_broadcast", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bd = self.data(b);
        let out: Vec<f32> =
            self.data(a).chunks_exact(bd.len()).flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y)).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("add_broadcast", t, Op::AddBroadcast { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("scale", t, Op::Scale { a, s }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("relu", t, Op::Relu { a }, &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push("gelu", t, Op::Gelu { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone();
        let mut t = t.reshape(shape)?;
        t.set_requires_grad(false);
        self.push("reshape", t, Op::Reshape { a }, &[a])
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [r, c] = s[..] else {
            return Err(invalid(format!("transpose expects a 2-D tensor, got {s:?}")));
        };
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(&[c, r], out)?, Op::Transpose { a }, &[a])
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let cols = *s.last().unwrap();
        if len == 0 || start + len > cols {
            return Err(invalid(format!("slice_last [{start}, {}) of {s:?}", start + len)));
        }
        let out = self.data(a).chunks_exact(cols).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push("slice_last", Tensor::new(&shape, out)?, Op::SliceLast { a, start }, &[a])
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape { op: "concat_last", lhs: self.shape(*first).to_vec(), rhs: s.to_vec() });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat_last", Tensor::new(&shape, out)?, Op::ConcatLast { parts: parts.to_vec() }, parts)
    }

    /// Concatenates feature maps along channels (the last NHWC axis).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_last(parts)
    }

    /// Slice `len` entries of the first axis starting at `start`.
    pub fn slice_first(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(invalid(format!("slice_first [{start}, {}) of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.data(a)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push("slice_first", Tensor::new(&shape, out)?, Op::SliceFirst { a, start }, &[a])
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return Err(Error::Shape { op: "concat_first", lhs: self.shape(*first).to_vec(), rhs: s.to_vec() });
            }
            rows += s[0];
            out.extend_from_slice(self.data(*p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_first", Tensor::new(&shape, out)?, Op::ConcatFirst { parts: parts.to_vec() }, parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        self.push("mean", Tensor::scalar((s / n) as f32), Op::Mean { a }, &[a])
    }

    // ------------------------------------------------------------ normalizers

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let cols = *s.last().unwrap();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", Tensor::new(&s, out)?, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape { op: "layer_norm", lhs: s, rhs: self.shape(p).to_vec() });
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0f32; self.value(a).numel()];
        let mut stats = Vec::with_capacity(out.len() / c);
        for (row, orow) in self.data(a).chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                let xhat = (row[j] as f64 - mean) * rstd;
                orow[j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
            }
            stats.push((mean as f32, rstd as f32));
        }
        self.push("layer_norm", Tensor::new(&s, out)?, Op::LayerNorm { a, gamma, beta, stats }, &[a, gamma, beta])
    }

    /// Batch normalization with batch statistics over every axis but the last.
    /// Returns the normalized map and the batch statistics for running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        self.check_channel_params("batch_norm", &s, c, gamma, beta)?;
        let rows = self.value(x).numel() / c;
        let xd = self.data(x);
        let mut sum = vec![0.0f64; c];
        for row in xd.chunks_exact(c) {
            for (acc, &v) in sum.iter_mut().zip(row) {
                *acc += v as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        let mut sq = vec![0.0f64; c];
        for row in xd.chunks_exact(c) {
            for j in 0..c {
                sq[j] += (row[j] as f64 - mean[j]).powi(2);
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0f32; xd.len()];
        for (row, orow) in xd.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                orow[j] = (((row[j] as f64 - mean[j]) * rstd[j]) * g[j] as f64 + b[j] as f64) as f32;
            }
        }
        let unbiased = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let stats = BatchStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            var: var.iter().map(|&v| (v * unbiased) as f32).collect(),
            count: rows,
        };
        let op =
            Op::BatchNorm { x, gamma, beta, mean: stats.mean.clone(), rstd: rstd.iter().map(|&r| r as f32).collect() };
        let v = self.push("batch_norm", Tensor::new(&s, out)?, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        self.check_channel_params("batch_norm_eval", &s, c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape { op: "batch_norm_eval", lhs: s, rhs: vec![running_mean.len()] });
        }
        let rstd: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0f32; self.value(x).numel()];
        for (row, orow) in self.data(x).chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                orow[j] = (row[j] - running_mean[j]) * rstd[j] * g[j] + b[j];
            }
        }
        let op = Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), rstd };
        self.push("batch_norm_eval", Tensor::new(&s, out)?, op, &[x, gamma, beta])
    }

    fn check_channel_params(&self, op: &'static str, s: &[usize], c: usize, g: Var, b: Var) -> Result<()> {
        for p in [g, b] {
            if self.shape(p) != [c] {
                return Err(Error::Shape { op, lhs: s.to_vec(), rhs: self.shape(p).to_vec() });
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------- spatial

    /// Cross-correlation of an NHWC map with a `k×k×cin×cout` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let ms = MapShape::of(self.shape(x))?;
        let ks = self.shape(kernel).to_vec();
        let [k, k2, cin, cout] = ks[..] else {
            return Err(Error::Shape { op: "conv2d", lhs: ms.dims().to_vec(), rhs: ks });
        };
        if k != k2 || cin != ms.c {
            return Err(Error::Shape { op: "conv2d", lhs: ms.dims().to_vec(), rhs: ks });
        }
        if stride == 0 || ms.h + 2 * padding < k || ms.w + 2 * padding < k {
            return Err(invalid(format!(
                "conv2d: kernel {k} stride {stride} padding {padding} gives no output on {}x{}",
                ms.h, ms.w
            )));
        }
        let geom = ConvGeom {
            n: ms.n,
            h: ms.h,
            w: ms.w,
            cin,
            k,
            stride,
            pad: padding,
            oh: (ms.h + 2 * padding - k) / stride + 1,
            ow: (ms.w + 2 * padding - k) / stride + 1,
        };
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(self.data(x), &geom));
        let mut out = vec![0.0f32; geom.rows() * cout];
        let src = cols.as_deref().unwrap_or(self.data(x));
        gemm(
            geom.rows(),
            cout,
            geom.patch_len(),
            src,
            Transpose::No,
            self.data(kernel),
            Transpose::No,
            &mut out,
            false,
        );
        let t = Tensor::new(&[geom.n, geom.oh, geom.ow, cout], out)?;
        self.push("conv2d", t, Op::Conv2d { x, kernel, geom, cols }, &[x, kernel])
    }

    /// Align-corners bilinear resize of an NHWC map.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize: output size must be positive"));
        }
        let from = MapShape::of(self.shape(x))?;
        let out = kernels::bilinear_forward(self.data(x), from.n, from.h, from.w, from.c, out_h, out_w);
        let t = Tensor::new(&[from.n, out_h, out_w, from.c], out)?;
        self.push("bilinear_resize", t, Op::Bilinear { x, from }, &[x])
    }

    /// Splits an NHWC image batch into `[n, (h/p)·(w/p), p·p·c]` patch rows,
    /// row-major over the grid and row-major within each patch.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let from = MapShape::of(self.shape(x))?;
        let out = patchify_data(self.data(x), from, patch)?;
        let (gh, gw) = (from.h / patch, from.w / patch);
        let t = Tensor::new(&[from.n, gh * gw, patch * patch * from.c], out)?;
        self.push("patchify", t, Op::Patchify { x, from, patch }, &[x])
    }

    // ---------------------------------------------------------------- losses

    /// Mean pixel-wise cross-entropy over non-ignored positions. `logits`
    /// has classes on the last axis; `labels` holds one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u16], ignore_index: u16) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = *s.last().unwrap();
        let rows = self.value(logits).numel() / k;
        if labels.len() != rows {
            return Err(Error::Shape { op: "cross_entropy", lhs: s, rhs: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= k) {
            return Err(Error::LabelRange { label: bad as usize, classes: k });
        }
        let mut probs = vec![0.0f32; rows * k];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for ((row, prow), &label) in self.data(logits).chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_z = z.ln() + max;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v as f64 - log_z).exp() as f32;
            }
            if label != ignore_index {
                total += log_z - row[label as usize] as f64;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits, probs, labels: labels.to_vec(), ignore: ignore_index, count };
        self.push("cross_entropy", Tensor::scalar(loss as f32), op, &[logits])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Gradients are then available
    /// through [`Tape::grad`]. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[id].take() else { continue };
            self.backprop_node(id, &dout, &mut grads);
            grads[id] = Some(dout);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                debug_assert_eq!(g.len(), node.value.numel());
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, dout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).numel() / k;
                if self.req(*a) {
                    let g = self.grad_buf(grads, *a);
                    gemm(m, k, n, dout, Transpose::No, self.data(*b), Transpose::Yes, g, true);
                }
                if self.req(*b) {
                    let g = self.grad_buf(grads, *b);
                    gemm(k, n, m, self.data(*a), Transpose::Yes, dout, Transpose::No, g, true);
                }
            }
            Op::MatMulNt { a, b } => {
                let (n, k) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).numel() / k;
                if self.req(*a) {
                    let g = self.grad_buf(grads, *a);
                    gemm(m, k, n, dout, Transpose::No, self.data(*b), Transpose::No, g, true);
                }
                if self.req(*b) {
                    let g = self.grad_buf(grads, *b);
                    gemm(n, k, m, dout, Transpose::Yes, self.data(*a), Transpose::No, g, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.req(v) {
                        add_into(self.grad_buf(grads, v), dout);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.req(*a) {
                    let bd = self.data(*b);
                    let g = self.grad_buf(grads, *a);
                    for ((gi, &d), &y) in g.iter_mut().zip(dout).zip(bd) {
                        *gi += d * y;
                    }
                }
                if self.req(*b) {
                    let ad = self.data(*a);
                    let g = self.grad_buf(grads, *b);
                    for ((gi, &d), &x) in g.iter_mut().zip(dout).zip(ad) {
                        *gi += d * x;
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.req(*a) {
                    add_into(self.grad_buf(grads, *a), dout);
                }
                if self.req(*b) {
                    let len = self.value(*b).numel();
                    let g = self.grad_buf(grads, *b);
                    for chunk in dout.chunks_exact(len) {
                        add_into(g, chunk);
                    }
                }
            }
            Op::Scale { a, s } => {
                let g = self.grad_buf(grads, *a);
                for (gi, &d) in g.iter_mut().zip(dout) {
                    *gi += s * d;
                }
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                let g = self.grad_buf(grads, *a);
                for ((gi, &d), &xi) in g.iter_mut().zip(dout).zip(x) {
                    if xi > 0.0 {
                        *gi += d;
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.data(*a);
                let g = self.grad_buf(grads, *a);
                for ((gi, &d), &xi) in g.iter_mut().zip(dout).zip(x) {
                    *gi += d * gelu_grad(xi);
                }
            }
            Op::Reshape { a } => add_into(self.grad_buf(grads, *a), dout),
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let g = self.grad_buf(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += dout[j * r + i];
                    }
                }
            }
            Op::SliceLast { a, start } => {
                let cols = *self.shape(*a).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let g = self.grad_buf(grads, *a);
                for (grow, drow) in g.chunks_exact_mut(cols).zip(dout.chunks_exact(len)) {
                    add_into(&mut grow[*start..*start + len], drow);
                }
            }
            Op::ConcatLast { parts } => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if self.req(*p) {
                        let g = self.grad_buf(grads, *p);
                        for (grow, drow) in g.chunks_exact_mut(w).zip(dout.chunks_exact(total)) {
                            add_into(grow, &drow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceFirst { a, start } => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                let g = self.grad_buf(grads, *a);
                add_into(&mut g[start * inner..start * inner + dout.len()], dout);
            }
            Op::ConcatFirst { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.req(*p) {
                        add_into(self.grad_buf(grads, *p), &dout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let g = self.grad_buf(grads, *a);
                g.iter_mut().for_each(|v| *v += dout[0]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f32;
                let g = self.grad_buf(grads, *a);
                g.iter_mut().for_each(|v| *v += dout[0] / n);
            }
            Op::Softmax { a } => {
                let cols = *node.value.shape().last().unwrap();
                let g = self.grad_buf(grads, *a);
                for ((grow, yrow), drow) in
                    g.chunks_exact_mut(cols).zip(out.chunks_exact(cols)).zip(dout.chunks_exact(cols))
                {
                    let dot: f64 = yrow.iter().zip(drow).map(|(&y, &d)| y as f64 * d as f64).sum();
                    for j in 0..cols {
                        grow[j] += (yrow[j] as f64 * (drow[j] as f64 - dot)) as f32;
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, stats } => {
                let c = self.value(*gamma).numel();
                let x = self.data(*a);
                let gm = self.data(*gamma);
                if self.req(*a) {
                    let g = self.grad_buf(grads, *a);
                    for ((grow, (xrow, drow)), &(mean, rstd)) in
                        g.chunks_exact_mut(c).zip(x.chunks_exact(c).zip(dout.chunks_exact(c))).zip(stats)
                    {
                        let (mean, rstd) = (mean as f64, rstd as f64);
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let xhat = (xrow[j] as f64 - mean) * rstd;
                            let dxhat = drow[j] as f64 * gm[j] as f64;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let xhat = (xrow[j] as f64 - mean) * rstd;
                            let dxhat = drow[j] as f64 * gm[j] as f64;
                            grow[j] += (rstd * (dxhat - m1 - xhat * m2)) as f32;
                        }
                    }
                }
                if self.req(*gamma) || self.req(*beta) {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for ((xrow, drow), &(mean, rstd)) in x.chunks_exact(c).zip(dout.chunks_exact(c)).zip(stats) {
                        for j in 0..c {
                            let xhat = (xrow[j] as f64 - mean as f64) * rstd as f64;
                            dg[j] += drow[j] as f64 * xhat;
                            db[j] += drow[j] as f64;
                        }
                    }
                    self.add_f64(grads, *gamma, &dg);
                    self.add_f64(grads, *beta, &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd } => {
                let c = mean.len();
                let xd = self.data(*x);
                let gm = self.data(*gamma);
                let rows = xd.len() / c;
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for (xrow, drow) in xd.chunks_exact(c).zip(dout.chunks_exact(c)) {
                    for j in 0..c {
                        let xhat = (xrow[j] as f64 - mean[j] as f64) * rstd[j] as f64;
                        dg[j] += drow[j] as f64 * xhat;
                        db[j] += drow[j] as f64;
                    }
                }
                if self.req(*x) {
                    // dxhat = dy·γ; dx = rstd·(dxhat − mean(dxhat) − x̂·mean(dxhat·x̂))
                    let m1: Vec<f64> = (0..c).map(|j| db[j] * gm[j] as f64 / rows as f64).collect();
                    let m2: Vec<f64> = (0..c).map(|j| dg[j] * gm[j] as f64 / rows as f64).collect();
                    let g = self.grad_buf(grads, *x);
                    for ((grow, xrow), drow) in g.chunks_exact_mut(c).zip(xd.chunks_exact(c)).zip(dout.chunks_exact(c))
                    {
                        for j in 0..c {
                            let r = rstd[j] as f64;
                            let xhat = (xrow[j] as f64 - mean[j] as f64) * r;
                            let dxhat = drow[j] as f64 * gm[j] as f64;
                            grow[j] += (r * (dxhat - m1[j] - xhat * m2[j])) as f32;
                        }
                    }
                }
                self.add_f64(grads, *gamma, &dg);
                self.add_f64(grads, *beta, &db);
            }
            Op::BatchNormEval { x, gamma, beta, mean, rstd } => {
                let c = mean.len();
                let xd = self.data(*x);
                let gm = self.data(*gamma);
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for (xrow, drow) in xd.chunks_exact(c).zip(dout.chunks_exact(c)) {
                    for j in 0..c {
                        dg[j] += drow[j] as f64 * ((xrow[j] - mean[j]) * rstd[j]) as f64;
                        db[j] += drow[j] as f64;
                    }
                }
                if self.req(*x) {
                    let g = self.grad_buf(grads, *x);
                    for (grow, drow) in g.chunks_exact_mut(c).zip(dout.chunks_exact(c)) {
                        for j in 0..c {
                            grow[j] += drow[j] * gm[j] * rstd[j];
                        }
                    }
                }
                self.add_f64(grads, *gamma, &dg);
                self.add_f64(grads, *beta, &db);
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                let cout = *node.value.shape().last().unwrap();
                let src = cols.as_deref().unwrap_or(self.data(*x));
                if self.req(*kernel) {
                    let g = self.grad_buf(grads, *kernel);
                    gemm(geom.patch_len(), cout, geom.rows(), src, Transpose::Yes, dout, Transpose::No, g, true);
                }
                if self.req(*x) {
                    let kd = self.data(*kernel);
                    if geom.is_pointwise() {
                        let g = self.grad_buf(grads, *x);
                        gemm(geom.rows(), geom.patch_len(), cout, dout, Transpose::No, kd, Transpose::Yes, g, true);
                    } else {
                        let mut dcols = vec![0.0f32; geom.rows() * geom.patch_len()];
                        gemm(
                            geom.rows(),
                            geom.patch_len(),
                            cout,
                            dout,
                            Transpose::No,
                            kd,
                            Transpose::Yes,
                            &mut dcols,
                            false,
                        );
                        kernels::col2im(&dcols, geom, self.grad_buf(grads, *x));
                    }
                }
            }
            Op::Bilinear { x, from } => {
                let s = node.value.shape();
                let g = self.grad_buf(grads, *x);
                kernels::bilinear_backward(dout, from.n, from.h, from.w, from.c, s[1], s[2], g);
            }
            Op::Patchify { x, from, patch } => {
                let g = self.grad_buf(grads, *x);
                unpatchify_add(dout, *from, *patch, g);
            }
            Op::CrossEntropy { logits, probs, labels, ignore, count } => {
                if *count == 0 {
                    self.grad_buf(grads, *logits);
                    return;
                }
                let k = *self.shape(*logits).last().unwrap();
                let scale = dout[0] / *count as f32;
                let g = self.grad_buf(grads, *logits);
                for ((grow, prow), &label) in g.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(labels) {
                    if label == *ignore {
                        continue;
                    }
                    for j in 0..k {
                        let target = if j == label as usize { 1.0 } else { 0.0 };
                        grow[j] += scale * (prow[j] - target);
                    }
                }
            }
        }
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> &'g mut Vec<f32> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn add_f64(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: &[f64]) {
        if !self.req(v) {
            return;
        }
        let g = self.grad_buf(grads, v);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d as f32;
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        z += e;
        *v = e as f32;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / z) as f32;
    }
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + x * pdf) as f32
}

pub(crate) fn patchify_data(x: &[f32], from: MapShape, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || !from.h.is_multiple_of(patch) || !from.w.is_multiple_of(patch) {
        return Err(invalid(format!("image {}x{} is not divisible by patch size {patch}", from.h, from.w)));
    }
    let (gh, gw, c) = (from.h / patch, from.w / patch, from.c);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..from.n {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((b * from.h + y) * from.w + gx * patch) * c;
                    out.extend_from_slice(&x[start..start + patch * c]);
                }
            }
        }
    }
    Ok(out)
}

/// Adds patch rows back into image layout (the adjoint of patchify, which
/// is also its inverse since the rearrangement is a permutation).
pub(crate) fn unpatchify_add(rows: &[f32], to: MapShape, patch: usize, dst: &mut [f32]) {
    let (gh, gw, c) = (to.h / patch, to.w / patch, to.c);
    let mut src = 0;
    for b in 0..to.n {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((b * to.h + y) * to.w + gx * patch) * c;
                    add_into(&mut dst[start..start + patch * c], &rows[src..src + patch * c]);
                    src += patch * c;
                }
            }
        }
    }
}
