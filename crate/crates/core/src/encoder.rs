//! Pure transformer encoder: `depth` pre-norm blocks of multi-head
//! self-attention and MLP, every block's output kept for the decoders.
//!
//! Parameters of layer `l` (1-based) live under `enc.layer{l}`:
//! `ln1`, `wq`, `wk`, `wv`, `wo`, `ln2`, `mlp1`, `mlp2`.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::params::{init_norm, trunc_normal, Graph, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of transformer layers.
    pub depth: usize,
    /// Hidden size `C`.
    pub hidden: usize,
    /// Attention head count `m`.
    pub heads: usize,
    /// MLP hidden expansion relative to `hidden`.
    pub mlp_ratio: usize,
    /// Apply a layer norm to the last layer's output.
    pub final_norm: bool,
    /// Dropout rate after the attention projection and the MLP.
    pub dropout: f32,
}

impl EncoderConfig {
    pub fn new(depth: usize, hidden: usize, heads: usize) -> Result<Self> {
        let cfg = Self { depth, hidden, heads, mlp_ratio: 4, final_norm: true, dropout: 0.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 12 layers, hidden 768, 12 heads.
    pub fn t_base() -> Self {
        Self { depth: 12, hidden: 768, heads: 12, mlp_ratio: 4, final_norm: true, dropout: 0.0 }
    }

    /// 24 layers, hidden 1024, 16 heads.
    pub fn t_large() -> Self {
        Self { depth: 24, hidden: 1024, heads: 16, mlp_ratio: 4, final_norm: true, dropout: 0.0 }
    }

    /// Desk-scale preset used by the tests: 4 layers, hidden 64, 4 heads.
    pub fn t_tiny() -> Self {
        Self { depth: 4, hidden: 64, heads: 4, mlp_ratio: 4, final_norm: true, dropout: 0.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(invalid("encoder sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!("hidden size {} is not divisible by head count {}", self.hidden, self.heads)));
        }
        Ok(())
    }

    /// Registers every layer's weights: truncated normal (std 0.02) projections,
    /// zero biases, unit/zero layer-norm affines.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.hidden;
        let hidden = c * self.mlp_ratio;
        for l in 1..=self.depth {
            let p = layer_prefix(l);
            init_norm(store, &format!("{p}.ln1"), c);
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("{p}.{w}.w"), trunc_normal(&[c, c], 0.02, rng));
            }
            init_norm(store, &format!("{p}.ln2"), c);
            store.insert(format!("{p}.mlp1.w"), trunc_normal(&[c, hidden], 0.02, rng));
            store.insert(format!("{p}.mlp1.b"), Tensor::zeros(&[hidden]));
            store.insert(format!("{p}.mlp2.w"), trunc_normal(&[hidden, c], 0.02, rng));
            store.insert(format!("{p}.mlp2.b"), Tensor::zeros(&[c]));
        }
        if self.final_norm {
            init_norm(store, "enc.norm", c);
        }
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("enc.layer{l}")
}

/// Features of every layer, `Z¹ … Z^depth`, each `[N, L, C]`.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub layers: Vec<Var>,
    /// Per layer, attention probabilities `[N, heads, L, L]` when requested.
    pub attention: Option<Vec<Tensor>>,
}

impl EncoderFeatures {
    /// Feature of layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> Result<Var> {
        l.checked_sub(1)
            .and_then(|i| self.layers.get(i).copied())
            .ok_or_else(|| invalid(format!("layer {l} outside 1..={}", self.layers.len())))
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("encoder has at least one layer")
    }
}

/// Single-head scaled dot-product attention on one `[L, C]` sequence.
///
/// Returns the head output `A · (Z W_V)` of shape `[L, d]` and the attention
/// matrix `A = softmax(Z W_Q (Z W_K)ᵀ / √d)` of shape `[L, L]`. No residual
/// is added here; it is applied once around the whole multi-head block.
pub fn self_attention(tape: &mut Tape, z: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let d = tape.shape(wq)[1];
    let q = tape.matmul(z, wq)?;
    let k = tape.matmul(z, wk)?;
    let v = tape.matmul(z, wv)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f32).sqrt())?;
    let attn = tape.softmax_rows(logits)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// `Z + [SA_1(LN(Z)); …; SA_m(LN(Z))] W_O` over a batch `[N, L, C]`.
///
/// Also returns each image's attention as `[heads, L, L]` values.
pub fn multi_head_attention(g: &mut Graph, prefix: &str, z: Var, heads: usize) -> Result<(Var, Vec<Tensor>)> {
    multi_head_attention_dropout(g, prefix, z, heads, 0.0)
}

fn multi_head_attention_dropout(
    g: &mut Graph,
    prefix: &str,
    z: Var,
    heads: usize,
    dropout: f32,
) -> Result<(Var, Vec<Tensor>)> {
    let [n, l, c] = g.tape.shape(z)[..] else {
        return Err(invalid(format!("expected [N, L, C], got {:?}", g.tape.shape(z))));
    };
    if c % heads != 0 {
        return Err(invalid(format!("hidden {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let h = g.layer_norm(&format!("{prefix}.ln1"), z)?;
    let [wq, wk, wv] = ["wq", "wk", "wv"].map(|w| g.param(&format!("{prefix}.{w}.w")));
    let (wq, wk, wv) = (wq?, wk?, wv?);
    let mut head_w = Vec::with_capacity(heads);
    for i in 0..heads {
        head_w.push((
            g.tape.slice_last(wq, i * d, d)?,
            g.tape.slice_last(wk, i * d, d)?,
            g.tape.slice_last(wv, i * d, d)?,
        ));
    }
    let mut per_image = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let zb = g.tape.slice_first(h, b, 1)?;
        let zb = g.tape.reshape(zb, &[l, c])?;
        let mut outs = Vec::with_capacity(heads);
        let mut attn = Vec::with_capacity(heads * l * l);
        for &(q, k, v) in &head_w {
            let (o, a) = self_attention(&mut g.tape, zb, q, k, v)?;
            outs.push(o);
            attn.extend_from_slice(g.tape.value(a).data());
        }
        per_image.push(g.tape.concat_last(&outs)?);
        maps.push(Tensor::new(&[heads, l, l], attn)?);
    }
    let cat = g.tape.concat_first(&per_image)?;
    let cat = g.tape.reshape(cat, &[n, l, c])?;
    let proj = g.linear(&format!("{prefix}.wo"), cat)?;
    let proj = g.dropout(proj, dropout)?;
    let out = g.tape.add(z, proj)?;
    Ok((out, maps))
}

/// `h + W2 · gelu(W1 · LN(h) + b1) + b2`.
pub fn mlp_block(g: &mut Graph, prefix: &str, h: Var) -> Result<Var> {
    mlp_block_dropout(g, prefix, h, 0.0)
}

fn mlp_block_dropout(g: &mut Graph, prefix: &str, h: Var, dropout: f32) -> Result<Var> {
    let x = g.layer_norm(&format!("{prefix}.ln2"), h)?;
    let x = g.linear(&format!("{prefix}.mlp1"), x)?;
    let x = g.tape.gelu(x)?;
    let x = g.linear(&format!("{prefix}.mlp2"), x)?;
    let x = g.dropout(x, dropout)?;
    g.tape.add(h, x)
}

/// Runs all layers on the embedded sequence `e` (`[N, L, C]`).
pub fn encoder_forward(g: &mut Graph, cfg: &EncoderConfig, e: Var, keep_attention: bool) -> Result<EncoderFeatures> {
    cfg.validate()?;
    let c = *g.tape.shape(e).last().unwrap();
    if c != cfg.hidden {
        return Err(Error::Shape { op: "encoder_forward", lhs: g.tape.shape(e).to_vec(), rhs: vec![cfg.hidden] });
    }
    let present = (1..).take_while(|&l| g.store().contains(&format!("{}.wq.w", layer_prefix(l)))).count();
    if present != cfg.depth {
        return Err(invalid(format!("config expects {} layers but {present} are stored", cfg.depth)));
    }
    let mut z = e;
    let mut layers = Vec::with_capacity(cfg.depth);
    let mut attention = keep_attention.then(Vec::new);
    for l in 1..=cfg.depth {
        let p = layer_prefix(l);
        let (h, maps) = multi_head_attention_dropout(g, &p, z, cfg.heads, cfg.dropout)?;
        z = mlp_block_dropout(g, &p, h, cfg.dropout)?;
        if let Some(att) = attention.as_mut() {
            let n = maps.len();
            let s = maps[0].shape().to_vec();
            let data = maps.into_iter().flat_map(Tensor::into_data).collect();
            att.push(Tensor::new(&[n, s[0], s[1], s[2]], data)?);
        }
        layers.push(z);
    }
    if cfg.final_norm {
        let last = layers.pop().unwrap();
        layers.push(g.layer_norm("enc.norm", last)?);
    }
    Ok(EncoderFeatures { layers, attention })
}
