//! Forward math of one candidate transformer: embeddings, linear multi-head
//! attention, zero masks, data-aware gates, the gated feed-forward block, the
//! weight-tied scoring head and the cross-entropy objective.
//!
//! Activations are `(B·N) x width` matrices; row `b·N + t` is position `t` of
//! sequence `b`. Because batches are left-padded, position `N-1` is always the
//! most recent real item.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Broadcast, NormAxis, Var};
use crate::data::{SequenceBatch, PAD};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: Scalar = 1e-6;

/// Zero-mask geometry of one candidate: trailing channels of every head slice
/// (hidden) and trailing inner channels are switched off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub gamma: Scalar,
    pub gamma_prime: Scalar,
    pub hidden: usize,
    pub inner: usize,
    pub heads: usize,
    /// Total hidden zeros; always a multiple of `heads`.
    pub hidden_zeros: usize,
    pub inner_zeros: usize,
}

impl MaskSpec {
    pub fn hidden_eff(&self) -> usize {
        self.hidden - self.hidden_zeros
    }

    pub fn inner_eff(&self) -> usize {
        self.inner - self.inner_zeros
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn head_dim_eff(&self) -> usize {
        self.hidden_eff() / self.heads
    }

    /// Indices of surviving hidden channels, ascending.
    pub fn hidden_active(&self) -> Vec<usize> {
        let (dh, keep) = (self.head_dim(), self.head_dim_eff());
        (0..self.heads).flat_map(|h| h * dh..h * dh + keep).collect()
    }

    pub fn inner_active(&self) -> Vec<usize> {
        (0..self.inner_eff()).collect()
    }

    pub fn hidden_mask(&self) -> Vec<Scalar> {
        let mut m = vec![0.0; self.hidden];
        self.hidden_active().into_iter().for_each(|j| m[j] = 1.0);
        m
    }

    pub fn inner_mask(&self) -> Vec<Scalar> {
        let mut m = vec![0.0; self.inner];
        self.inner_active().into_iter().for_each(|j| m[j] = 1.0);
        m
    }

    pub fn is_identity(&self) -> bool {
        self.hidden_zeros == 0 && self.inner_zeros == 0
    }
}

/// Masks as they are consumed by a forward pass. `None` means "all ones".
#[derive(Clone, Debug)]
pub struct BlockMasks {
    hidden: Option<Tensor>,
    inner: Option<Tensor>,
    hidden_active: Option<Rc<Vec<bool>>>,
    head_dim_eff: usize,
}

impl BlockMasks {
    /// No masking: a plain block of the given width.
    pub fn dense(width: usize, heads: usize) -> Self {
        Self {
            hidden: None,
            inner: None,
            hidden_active: None,
            head_dim_eff: width / heads,
        }
    }

    pub fn from_spec(spec: &MaskSpec) -> Self {
        if spec.is_identity() {
            return Self::dense(spec.hidden, spec.heads);
        }
        let hm = spec.hidden_mask();
        Self {
            hidden_active: Some(Rc::new(hm.iter().map(|&x| x != 0.0).collect())),
            hidden: (spec.hidden_zeros > 0).then(|| Tensor::row(&hm)),
            inner: (spec.inner_zeros > 0).then(|| Tensor::row(&spec.inner_mask())),
            head_dim_eff: spec.head_dim_eff(),
        }
    }
}

/// Hyperparameters shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub heads: usize,
    pub dropout: Scalar,
    /// Upper bound of gate outputs (`delta = scale * sigmoid(.)`).
    pub gate_scale: Scalar,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dropout: 0.2,
            gate_scale: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingParams {
    /// `(num_items + 1) x d`, row 0 frozen at zero.
    pub items: ParamId,
    /// `N x d`
    pub positions: ParamId,
}

/// Stack of (weight, bias) layers. Empty means the gate is absent (`delta = 1`).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GateParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub attn_gain: ParamId,
    pub attn_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ffn_gain: ParamId,
    pub ffn_bias: ParamId,
    /// Scales the attention output fed to the first dense layer.
    pub gate_hidden: GateParams,
    /// Scales the inner activations fed to the second dense layer.
    pub gate_inner: GateParams,
}

/// `(fan_in, fan_out)` of each gate layer: the first maps the model width to
/// the target width, the rest stay at the target width.
pub fn gate_layer_shapes(input: usize, target: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers).map(|l| (if l == 0 { input } else { target }, target)).collect()
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as Scalar).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
}

impl EmbeddingParams {
    pub fn init(store: &mut ParamStore, prefix: &str, num_items: usize, seq_len: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut table = |rows: usize| {
            let data = (0..rows * d).map(|_| rng.gen_range(-0.1..0.1)).collect();
            Tensor::new(vec![rows, d], data).expect("positive extents")
        };
        let items = table(num_items + 1);
        let positions = table(seq_len);
        Self {
            items: store.add_padded_table(format!("{prefix}item_embedding"), items),
            positions: store.add(format!("{prefix}position_embedding"), positions, ParamGroup::Weights),
        }
    }
}

impl GateParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, target: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let shapes = gate_layer_shapes(input, target, layers);
        let last = shapes.len().saturating_sub(1);
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(l, (fi, fo))| {
                // Final layer starts at zero so every gate opens neutral (delta = scale / 2).
                let w = if l == last {
                    Tensor::zeros(&[fi, fo])
                } else {
                    xavier(rng, fi, fo)
                };
                (
                    store.add(format!("{prefix}.{l}.weight"), w, ParamGroup::Weights),
                    store.add(format!("{prefix}.{l}.bias"), Tensor::zeros(&[1, fo]), ParamGroup::Weights),
                )
            })
            .collect();
        Self { layers }
    }
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        inner: usize,
        gate_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mat = |store: &mut ParamStore, name: &str, fi: usize, fo: usize| {
            store.add(format!("{prefix}.{name}"), xavier(rng, fi, fo), ParamGroup::Weights)
        };
        let wq = mat(store, "wq", width, width);
        let wk = mat(store, "wk", width, width);
        let wv = mat(store, "wv", width, width);
        let wo = mat(store, "wo", width, width);
        let ffn_w1 = mat(store, "ffn_w1", width, inner);
        let ffn_w2 = mat(store, "ffn_w2", inner, width);
        let vec_param = |store: &mut ParamStore, name: &str, n: usize, v: Scalar| {
            store.add(format!("{prefix}.{name}"), Tensor::full(&[1, n], v), ParamGroup::Weights)
        };
        let attn_gain = vec_param(store, "attn_gain", width, 1.0);
        let attn_bias = vec_param(store, "attn_bias", width, 0.0);
        let ffn_b1 = vec_param(store, "ffn_b1", inner, 0.0);
        let ffn_b2 = vec_param(store, "ffn_b2", width, 0.0);
        let ffn_gain = vec_param(store, "ffn_gain", width, 1.0);
        let ffn_bias = vec_param(store, "ffn_bias", width, 0.0);
        let gate_hidden = GateParams::init(store, &format!("{prefix}.gate_hidden"), width, width, gate_layers, rng);
        let gate_inner = GateParams::init(store, &format!("{prefix}.gate_inner"), width, inner, gate_layers, rng);
        Self {
            wq,
            wk,
            wv,
            wo,
            attn_gain,
            attn_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ffn_gain,
            ffn_bias,
            gate_hidden,
            gate_inner,
        }
    }
}

/// Per-batch row bookkeeping for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Rows {
    pub batch: usize,
    pub seq: usize,
    /// `(B·N) x 1` column: 1 for real cells, 0 for padding.
    pub pad: Var,
}

fn apply_mask(g: &mut Graph<'_>, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        None => Ok(x),
        Some(m) => {
            let mv = g.constant(m.clone());
            g.tape.mul_broadcast(x, mv, Broadcast::Row)
        }
    }
}

/// `E[b,t] = items[id] + positions[t]`, with padded cells forced to zero.
pub fn embed(g: &mut Graph<'_>, emb: &EmbeddingParams, batch: &SequenceBatch) -> Result<(Var, Rows)> {
    let table = g.param(emb.items);
    let num_items = g.value(table).rows() - 1;
    if let Some(&bad) = batch.items.iter().find(|&&i| i > num_items) {
        return Err(Error::IdOutOfRange { id: bad, max: num_items });
    }
    let pos_table = g.param(emb.positions);
    let npos = g.value(pos_table).rows();
    if batch.seq_len > npos {
        return Err(Error::Config(format!(
            "batch window {} exceeds positional table {}",
            batch.seq_len, npos
        )));
    }
    let offset = npos - batch.seq_len;
    let item_rows = g.tape.gather(table, Rc::new(batch.items.clone()))?;
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| offset..offset + batch.seq_len).collect();
    let pos_rows = g.tape.gather(pos_table, Rc::new(positions))?;
    let sum = g.tape.add(item_rows, pos_rows)?;
    let pad_col: Vec<Scalar> = batch.items.iter().map(|&i| if i == PAD { 0.0 } else { 1.0 }).collect();
    let pad = g.constant(Tensor::column(&pad_col));
    let e = g.tape.mul_broadcast(sum, pad, Broadcast::Col)?;
    Ok((
        e,
        Rows {
            batch: batch.len(),
            seq: batch.seq_len,
            pad,
        },
    ))
}

/// Single-head linear attention `A1(elu Q) · (A2(elu K)ᵀ · V)` over an `N x d` window.
pub fn linear_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (n, d) = (g.value(q).rows(), g.value(q).cols());
    linear_attention_heads(g, q, k, v, n, 1, d as Scalar)
}

fn linear_attention_heads(g: &mut Graph<'_>, q: Var, k: Var, v: Var, seq: usize, heads: usize, dim_scale: Scalar) -> Result<Var> {
    let d = g.value(q).cols();
    let qe = g.tape.elu(q);
    let ke = g.tape.elu(k);
    let qn = g.tape.l2_normalize(qe, NormAxis::Row, d / heads, dim_scale)?;
    let kn = g.tape.l2_normalize(ke, NormAxis::Col, seq, dim_scale)?;
    g.tape.block_linear_attention(qn, kn, v, seq, heads)
}

/// Attention sublayer `S = LayerNorm(H + mask(MHA(H)))`, padded rows re-zeroed.
pub fn multi_head_forward(
    g: &mut Graph<'_>,
    h: Var,
    block: &BlockParams,
    masks: &BlockMasks,
    heads: usize,
    rows: Rows,
) -> Result<Var> {
    let d = g.value(h).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("hidden width {d} is not divisible by {heads} heads")));
    }
    let project = |g: &mut Graph<'_>, w: ParamId| -> Result<Var> {
        let wv = g.param(w);
        let x = g.tape.matmul(h, wv)?;
        apply_mask(g, x, masks.hidden.as_ref())
    };
    let q = project(g, block.wq)?;
    let k = project(g, block.wk)?;
    let v = project(g, block.wv)?;
    let a = linear_attention_heads(g, q, k, v, rows.seq, heads, masks.head_dim_eff as Scalar)?;
    let wo = g.param(block.wo);
    let o = g.tape.matmul(a, wo)?;
    let o = apply_mask(g, o, masks.hidden.as_ref())?;
    let r = g.tape.add(h, o)?;
    let (gain, bias) = (g.param(block.attn_gain), g.param(block.attn_bias));
    let s = g.tape.layer_norm_masked(r, gain, bias, LAYER_NORM_EPS, masks.hidden_active.clone())?;
    g.tape.mul_broadcast(s, rows.pad, Broadcast::Col)
}

/// `delta = scale * sigmoid(X' W + b)` with `X' = ReLU(X W1 + b1)` (and further
/// ReLU layers for deeper gates). Returns `None` for an absent gate.
pub fn gate_forward(
    g: &mut Graph<'_>,
    gate: &GateParams,
    x: Var,
    hidden_mask: Option<&Tensor>,
    scale: Scalar,
) -> Result<Option<Var>> {
    let Some(last) = gate.layers.len().checked_sub(1) else {
        return Ok(None);
    };
    let mut cur = x;
    for (l, &(w, b)) in gate.layers.iter().enumerate() {
        let wv = g.param(w);
        let bv = g.param(b);
        let z = g.tape.matmul(cur, wv)?;
        let z = g.tape.add_bias(z, bv)?;
        cur = if l == last {
            let s = g.tape.sigmoid(z);
            g.tape.scale(s, scale)
        } else {
            let a = g.tape.relu(z);
            apply_mask(g, a, hidden_mask)?
        };
    }
    Ok(Some(cur))
}

/// One gated block: attention sublayer, then
/// `F1 = GeLU((d1 ⊙ S) W1 + b1)`, `F2 = (d2 ⊙ F1) W2 + b2`,
/// `T = LayerNorm(S + Dropout(F2))`.
///
/// `prev` is the previous layer's state and `gate_input` the embedded batch.
pub fn block_forward(
    g: &mut Graph<'_>,
    block: &BlockParams,
    masks: &BlockMasks,
    cfg: &BlockConfig,
    prev: Var,
    gate_input: Var,
    rows: Rows,
) -> Result<Var> {
    let h = apply_mask(g, prev, masks.hidden.as_ref())?;
    let x = apply_mask(g, gate_input, masks.hidden.as_ref())?;
    let s = multi_head_forward(g, h, block, masks, cfg.heads, rows)?;

    let d1 = gate_forward(g, &block.gate_hidden, x, masks.hidden.as_ref(), cfg.gate_scale)?;
    let d2 = gate_forward(g, &block.gate_inner, x, masks.inner.as_ref(), cfg.gate_scale)?;

    let in1 = match d1 {
        Some(d) => g.tape.mul(d, s)?,
        None => s,
    };
    let (w1, b1) = (g.param(block.ffn_w1), g.param(block.ffn_b1));
    let z1 = g.tape.matmul(in1, w1)?;
    let z1 = g.tape.add_bias(z1, b1)?;
    let f1 = g.tape.gelu(z1);
    let f1 = apply_mask(g, f1, masks.inner.as_ref())?;

    let in2 = match d2 {
        Some(d) => g.tape.mul(d, f1)?,
        None => f1,
    };
    let (w2, b2) = (g.param(block.ffn_w2), g.param(block.ffn_b2));
    let z2 = g.tape.matmul(in2, w2)?;
    let f2 = g.tape.add_bias(z2, b2)?;
    let f2 = apply_mask(g, f2, masks.hidden.as_ref())?;
    let f2 = g.dropout(f2, cfg.dropout)?;

    let r = g.tape.add(s, f2)?;
    let (gain, bias) = (g.param(block.ffn_gain), g.param(block.ffn_bias));
    let t = g.tape.layer_norm_masked(r, gain, bias, LAYER_NORM_EPS, masks.hidden_active.clone())?;
    g.tape.mul_broadcast(t, rows.pad, Broadcast::Col)
}

/// Logits `<Y[b, last], items[v]>` for every real item `v` (column `v - 1`).
pub fn score_items(g: &mut Graph<'_>, y: Var, emb: &EmbeddingParams, rows: Rows) -> Result<Var> {
    let last: Vec<usize> = (0..rows.batch).map(|b| b * rows.seq + rows.seq - 1).collect();
    let y_last = g.tape.select_rows(y, Rc::new(last))?;
    let table = g.param(emb.items);
    let real = g.tape.slice_rows_from(table, 1)?;
    g.tape.matmul_nt(y_last, real)
}

/// Batch-mean multiclass cross-entropy over the item vocabulary.
pub fn ce_loss(g: &mut Graph<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.contains(&PAD) {
        return Err(Error::Usage("cross-entropy target is the padding id".into()));
    }
    let cols: Vec<usize> = targets.iter().map(|&t| t - 1).collect();
    g.tape.cross_entropy(logits, Rc::new(cols))
}
