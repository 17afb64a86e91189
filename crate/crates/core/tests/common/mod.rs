//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written with plain loops over `Vec<Vec<f64>>` so it
//! shares no arithmetic with the autodiff engine it checks.

#![allow(dead_code)]

use std::path::Path;

use dnsrec::autodiff::{Tape, Var};
use dnsrec::config::RunConfig;
use dnsrec::data::{SequenceBatch, PAD};
use dnsrec::model::{BlockParams, MaskSpec, LAYER_NORM_EPS};
use dnsrec::params::{ParamId, ParamStore};
use dnsrec::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod gradients;
pub mod paths;

pub type M = Vec<Vec<f64>>;

pub const FD_STEP: f64 = 1e-4;

pub fn synthetic_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(include_str!("../../../../configs/synthetic.conf")).expect("synthetic.conf parses");
    cfg
}

pub fn smoke_config(output: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(include_str!("../../../../configs/smoke.conf")).expect("smoke.conf parses");
    cfg.output = output.to_path_buf();
    cfg
}

pub fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Like [`random_tensor`] but keeps every entry at least `gap` away from zero,
/// so kinked functions are differentiable at and around every entry.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..scale);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error, over all inputs, between tape gradients and central
/// differences of the scalar `sum(R ⊙ f(inputs))` with a fixed random `R`.
pub fn grad_check(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    use rand::SeedableRng;
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        t.value(out).shape().to_vec()
    };
    let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &probe, 1.0);
    let objective = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        let w = t.leaf(weights.clone());
        let prod = t.mul(out, w).unwrap();
        let loss = t.sum(prod);
        let value = t.value(loss).data()[0];
        let grads = t.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (value, gs)
    };
    let (_, analytic) = objective(inputs);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = objective(&xs).0;
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = objective(&xs).0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic[i].data(), &numeric));
    }
    worst
}

pub fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn flat(m: &M) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for (j, o) in out[i].iter_mut().enumerate() {
            *o = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn zip(a: &M, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(&x, &y)| f(x, y)).collect()).collect()
}

fn add_row(a: &M, bias: &[f64]) -> M {
    a.iter().map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect()).collect()
}

fn mask_cols(a: &M, mask: &[f64]) -> M {
    a.iter().map(|r| r.iter().zip(mask).map(|(x, m)| x * m).collect()).collect()
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scale_to(v: &[f64], dim_scale: f64) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / (dim_scale.sqrt() * n)).collect()
    }
}

/// Rows scaled to norm `1/sqrt(s)`.
pub fn row_normalize(a: &M, dim_scale: f64) -> M {
    a.iter().map(|r| scale_to(r, dim_scale)).collect()
}

/// Columns scaled to norm `1/sqrt(s)`.
pub fn col_normalize(a: &M, dim_scale: f64) -> M {
    transpose(&row_normalize(&transpose(a), dim_scale))
}

/// Attention in the quadratic order: the `N x N` matrix `A1 A2ᵀ` is formed
/// explicitly and then applied to `V`.
pub fn quadratic_attention(q: &M, k: &M, v: &M, dim_scale: f64) -> M {
    let a1 = row_normalize(&map(q, elu), dim_scale);
    let a2 = col_normalize(&map(k, elu), dim_scale);
    let n = q.len();
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            scores[i][j] = a1[i].iter().zip(&a2[j]).map(|(x, y)| x * y).sum();
        }
    }
    mm(&scores, v)
}

fn layer_norm(a: &M, gain: &[f64], bias: &[f64], active: &[bool]) -> M {
    let count = active.iter().filter(|&&x| x).count() as f64;
    a.iter()
        .map(|r| {
            let vals: Vec<f64> = r.iter().zip(active).filter(|(_, &on)| on).map(|(&x, _)| x).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
            let sd = (var + LAYER_NORM_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, &x)| if active[j] { gain[j] * (x - mean) / sd + bias[j] } else { 0.0 })
                .collect()
        })
        .collect()
}

fn param(store: &ParamStore, id: ParamId) -> M {
    to_m(store.get(id))
}

fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn gate(store: &ParamStore, layers: &[(ParamId, ParamId)], x: &M, mask: &[f64], scale: f64) -> Option<M> {
    let last = layers.len().checked_sub(1)?;
    let mut cur = x.clone();
    for (l, &(w, b)) in layers.iter().enumerate() {
        let z = add_row(&mm(&cur, &param(store, w)), &vector(store, b));
        cur = if l == last {
            map(&z, |v| scale * sigmoid(v))
        } else {
            mask_cols(&map(&z, |v| v.max(0.0)), mask)
        };
    }
    Some(cur)
}

/// One gated block evaluated step by step in eval mode. `prev` and `e` are
/// `(B·N) x d` with sequences stacked; `pad[r]` is false for padded cells.
pub fn reference_block(
    store: &ParamStore,
    block: &BlockParams,
    spec: &MaskSpec,
    gate_scale: f64,
    prev: &M,
    e: &M,
    pad: &[bool],
    seq: usize,
) -> M {
    let hm = spec.hidden_mask();
    let im = spec.inner_mask();
    let active: Vec<bool> = hm.iter().map(|&x| x != 0.0).collect();
    let zero_pad = |a: M| -> M { a.into_iter().zip(pad).map(|(r, &keep)| if keep { r } else { vec![0.0; r.len()] }).collect() };
    let h = mask_cols(prev, &hm);
    let x = mask_cols(e, &hm);

    let q = mask_cols(&mm(&h, &param(store, block.wq)), &hm);
    let k = mask_cols(&mm(&h, &param(store, block.wk)), &hm);
    let v = mask_cols(&mm(&h, &param(store, block.wv)), &hm);
    let (heads, dh) = (spec.heads, spec.head_dim());
    let dim_scale = spec.head_dim_eff() as f64;
    let mut att = vec![vec![0.0; spec.hidden]; h.len()];
    for b in 0..h.len() / seq {
        for hd in 0..heads {
            let cut = |a: &M| -> M { a[b * seq..(b + 1) * seq].iter().map(|r| r[hd * dh..(hd + 1) * dh].to_vec()).collect() };
            let qn = row_normalize(&map(&cut(&q), elu), dim_scale);
            let kn = col_normalize(&map(&cut(&k), elu), dim_scale);
            let out = mm(&qn, &mm(&transpose(&kn), &cut(&v)));
            for t in 0..seq {
                att[b * seq + t][hd * dh..(hd + 1) * dh].copy_from_slice(&out[t]);
            }
        }
    }
    let o = mask_cols(&mm(&att, &param(store, block.wo)), &hm);
    let s = zero_pad(layer_norm(&zip(&h, &o, |a, b| a + b), &vector(store, block.attn_gain), &vector(store, block.attn_bias), &active));

    let d1 = gate(store, &block.gate_hidden.layers, &x, &hm, gate_scale);
    let d2 = gate(store, &block.gate_inner.layers, &x, &im, gate_scale);
    let in1 = d1.map_or(s.clone(), |d| zip(&d, &s, |a, b| a * b));
    let f1 = mask_cols(&map(&add_row(&mm(&in1, &param(store, block.ffn_w1)), &vector(store, block.ffn_b1)), gelu), &im);
    let in2 = d2.map_or(f1.clone(), |d| zip(&d, &f1, |a, b| a * b));
    let f2 = mask_cols(&add_row(&mm(&in2, &param(store, block.ffn_w2)), &vector(store, block.ffn_b2)), &hm);
    zero_pad(layer_norm(&zip(&s, &f2, |a, b| a + b), &vector(store, block.ffn_gain), &vector(store, block.ffn_bias), &active))
}

/// `E` rows for a batch computed by direct table lookup.
pub fn reference_embed(store: &ParamStore, items: ParamId, positions: ParamId, batch: &SequenceBatch) -> (M, Vec<bool>) {
    let (it, pos) = (param(store, items), param(store, positions));
    let offset = pos.len() - batch.seq_len;
    let mut rows = Vec::new();
    let mut pad = Vec::new();
    for b in 0..batch.len() {
        for (t, &id) in batch.row(b).iter().enumerate() {
            if id == PAD {
                rows.push(vec![0.0; it[0].len()]);
                pad.push(false);
            } else {
                rows.push(it[id].iter().zip(&pos[offset + t]).map(|(a, p)| a + p).collect());
                pad.push(true);
            }
        }
    }
    (rows, pad)
}

/// Logits `<Y[b, last], items[v]>` with an explicit loop over items.
pub fn reference_scores(store: &ParamStore, items: ParamId, y: &M, seq: usize) -> M {
    let it = param(store, items);
    (0..y.len() / seq)
        .map(|b| {
            let last = &y[b * seq + seq - 1];
            it[1..].iter().map(|row| row.iter().zip(last).map(|(a, c)| a * c).sum()).collect()
        })
        .collect()
}

/// Brute-force metrics: full sort by (score desc, id asc), then position lookup.
pub fn brute_metrics(scores: &[f64], target: usize, k: usize) -> (f64, f64, f64) {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let rank = ids.iter().position(|&i| i == target).unwrap() + 1;
    if rank > k {
        (0.0, 0.0, 0.0)
    } else {
        (1.0, 1.0 / rank as f64, 1.0 / ((rank + 1) as f64).log2())
    }
}

/// FLOPs of one block, counted by walking the forward operation by operation.
/// A multiply-add is two FLOPs, a transcendental five, anything elementwise one.
pub fn tally_block_flops(n: usize, d: usize, inner: usize, heads: usize, gate_layers: usize) -> u64 {
    let (n, d, inner) = (n as u64, d as u64, inner as u64);
    let dh = d / heads as u64;
    let matmul = |rows: u64, k: u64, cols: u64| 2 * rows * k * cols;
    let mut total = 0;
    for _ in 0..3 {
        total += matmul(n, d, d);
    }
    total += 5 * n * d * 2; // elu of Q and K
    total += 5 * n * d * 2; // two L2 normalizations
    for _ in 0..heads {
        total += matmul(dh, n, dh); // Kᵀ V
        total += matmul(n, dh, dh); // Q (Kᵀ V)
    }
    total += matmul(n, d, d); // output projection
    total += n * d + 5 * n * d; // residual + norm
    let mut gate = |target: u64| {
        let mut fan_in = d;
        for _ in 0..gate_layers {
            total += matmul(n, fan_in, target) + n * target + 5 * n * target;
            fan_in = target;
        }
        if gate_layers > 0 {
            total += 2 * n * target; // scale and apply
        }
    };
    gate(d);
    gate(inner);
    total += matmul(n, d, inner) + n * inner + 5 * n * inner;
    total += matmul(n, inner, d) + n * d;
    total += n * d + 5 * n * d;
    total
}

/// Left-padded random batch over items `1..=num_items`.
pub fn random_batch(rng: &mut ChaCha8Rng, num_items: usize, seq_len: usize, size: usize) -> SequenceBatch {
    let mut items = Vec::new();
    let mut lengths = Vec::new();
    for _ in 0..size {
        let len = rng.gen_range(1..=seq_len);
        items.extend(std::iter::repeat(PAD).take(seq_len - len));
        items.extend((0..len).map(|_| rng.gen_range(1..=num_items)));
        lengths.push(len);
    }
    SequenceBatch {
        seq_len,
        items,
        targets: (0..size).map(|_| rng.gen_range(1..=num_items)).collect(),
        lengths,
        users: (0..size).collect(),
    }
}

/// Replaces every parameter with uniform noise, keeping the padding row zero.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut t = random_tensor(rng, store.get(id).shape(), scale);
        if store.name(id).ends_with("item_embedding") {
            let width = t.cols();
            t.data_mut()[..width].iter_mut().for_each(|x| *x = 0.0);
        }
        store.set(id, t).unwrap();
    }
}
