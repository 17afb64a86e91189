//! Analytic FLOPs accounting and the resource penalty.
//!
//! Counting constants:
//!
//! | operation                                   | FLOPs                    |
//! |---------------------------------------------|--------------------------|
//! | multiply-accumulate                         | 2                        |
//! | activation (elu, relu, gelu, sigmoid)       | 5 per element            |
//! | L2 normalization, layer normalization       | 5 per element            |
//! | residual add, bias add, gate multiply       | 1 per element            |
//! | embedding lookup, dropout, masking          | 0                        |
//!
//! Every count is for one sequence of length `N` and uses the effective
//! widths of the candidate, so a masked candidate costs what its compact
//! counterpart costs.

use serde::Serialize;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{gate_layer_shapes, MaskSpec};
use crate::params::Graph;
use crate::supernet::SupernetConfig;
use crate::tensor::{Scalar, Tensor};

pub const FLOPS_PER_MAC: u64 = 2;
pub const ACTIVATION_FLOPS: u64 = 5;
pub const NORM_FLOPS: u64 = 5;
pub const ELEMENTWISE_FLOPS: u64 = 1;

/// Geometry that determines the cost of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockShape {
    pub seq_len: usize,
    pub hidden_eff: usize,
    pub inner_eff: usize,
    pub heads: usize,
    pub gate_layers: usize,
}

impl BlockShape {
    pub fn of(mask: &MaskSpec, seq_len: usize, gate_layers: usize) -> Self {
        Self {
            seq_len,
            hidden_eff: mask.hidden_eff(),
            inner_eff: mask.inner_eff(),
            heads: mask.heads,
            gate_layers,
        }
    }
}

/// Per-operation breakdown of one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockFlops {
    pub projections: u64,
    pub attention_core: u64,
    pub attention_pointwise: u64,
    pub ffn: u64,
    pub gates: u64,
    pub norms_residuals: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.attention_core + self.attention_pointwise + self.ffn + self.gates + self.norms_residuals
    }
}

fn gate_flops(n: u64, input: usize, target: usize, layers: usize) -> u64 {
    if layers == 0 {
        return 0;
    }
    let layer_cost: u64 = gate_layer_shapes(input, target, layers)
        .into_iter()
        .map(|(fi, fo)| {
            let (fi, fo) = (fi as u64, fo as u64);
            FLOPS_PER_MAC * n * fi * fo + ELEMENTWISE_FLOPS * n * fo + ACTIVATION_FLOPS * n * fo
        })
        .sum();
    // scale by gate_scale, then multiply into the dense-layer input
    layer_cost + 2 * ELEMENTWISE_FLOPS * n * target as u64
}

pub fn block_flops_breakdown(shape: &BlockShape) -> BlockFlops {
    let n = shape.seq_len as u64;
    let d = shape.hidden_eff as u64;
    let inner = shape.inner_eff as u64;
    let dh = d / shape.heads as u64;
    BlockFlops {
        projections: 4 * FLOPS_PER_MAC * n * d * d,
        // per head: K^T V is dh x dh over N, then Q times that
        attention_core: shape.heads as u64 * 2 * FLOPS_PER_MAC * n * dh * dh,
        attention_pointwise: 2 * ACTIVATION_FLOPS * n * d + 2 * NORM_FLOPS * n * d,
        ffn: FLOPS_PER_MAC * n * d * inner
            + ELEMENTWISE_FLOPS * n * inner
            + ACTIVATION_FLOPS * n * inner
            + FLOPS_PER_MAC * n * inner * d
            + ELEMENTWISE_FLOPS * n * d,
        gates: gate_flops(n, shape.hidden_eff, shape.hidden_eff, shape.gate_layers)
            + gate_flops(n, shape.hidden_eff, shape.inner_eff, shape.gate_layers),
        norms_residuals: 2 * (ELEMENTWISE_FLOPS * n * d + NORM_FLOPS * n * d),
    }
}

pub fn block_flops(shape: &BlockShape) -> u64 {
    block_flops_breakdown(shape).total()
}

/// FLOPs of one block of a candidate with intensities `(gamma, gamma_prime)`.
pub fn flops_of_candidate(cfg: &SupernetConfig, gamma: Scalar, gamma_prime: Scalar, seq_len: usize, gate_layers: usize) -> Result<u64> {
    let single = SupernetConfig {
        gammas: vec![gamma],
        gamma_primes: vec![gamma_prime],
        gate_layers,
        seq_len,
        ..cfg.clone()
    };
    let mask = &crate::supernet::make_masks(&single)?[0];
    Ok(block_flops(&BlockShape::of(mask, seq_len, gate_layers)))
}

/// `entries[i][l]`: FLOPs of the network made of candidate `i` cut after
/// layer `l + 1`, i.e. `l + 1` stacked blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsTable {
    pub entries: Vec<Vec<u64>>,
}

impl FlopsTable {
    pub fn build(cfg: &SupernetConfig) -> Result<Self> {
        let masks = crate::supernet::make_masks(cfg)?;
        let entries = masks
            .iter()
            .map(|m| {
                let block = block_flops(&BlockShape::of(m, cfg.seq_len, cfg.gate_layers));
                (1..=cfg.layers as u64).map(|l| l * block).collect()
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn candidates(&self) -> usize {
        self.entries.len()
    }

    pub fn layers(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn get(&self, candidate: usize, depth: usize) -> u64 {
        self.entries[candidate][depth - 1]
    }

    pub fn max(&self) -> u64 {
        self.entries.iter().flatten().copied().max().unwrap_or(0)
    }

    /// `m x L` table as a tensor, optionally divided by `scale`.
    pub fn to_tensor(&self, scale: Scalar) -> Tensor {
        let rows: Vec<Vec<Scalar>> = self
            .entries
            .iter()
            .map(|r| r.iter().map(|&f| f as Scalar / scale).collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,layer,flops\n");
        for (i, row) in self.entries.iter().enumerate() {
            for (l, f) in row.iter().enumerate() {
                out.push_str(&format!("{i},{},{f}\n", l + 1));
            }
        }
        out
    }
}

fn check_depth(dynamic_depth: usize, layers: usize) -> Result<()> {
    if dynamic_depth == 0 || dynamic_depth > layers {
        return Err(Error::Usage(format!("dynamic depth {dynamic_depth} outside [1, {layers}]")));
    }
    Ok(())
}

/// `L_RC = (L_t / L) sum_j sum_i p_i q_j FLOPs_ij`.
pub fn resource_loss(p: &[Scalar], q: &[Scalar], table: &FlopsTable, dynamic_depth: usize) -> Result<Scalar> {
    check_depth(dynamic_depth, table.layers())?;
    if p.len() != table.candidates() || q.len() != table.layers() {
        return Err(Error::Usage(format!(
            "resource loss expects {} + {} weights, got {} + {}",
            table.candidates(),
            table.layers(),
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            total += pi * qj * table.entries[i][j] as Scalar;
        }
    }
    Ok(dynamic_depth as Scalar / table.layers() as Scalar * total)
}

/// Differentiable form of [`resource_loss`] with table entries divided by `scale`.
pub fn resource_loss_var(g: &mut Graph<'_>, p: Var, q: Var, table: &FlopsTable, dynamic_depth: usize, scale: Scalar) -> Result<Var> {
    check_depth(dynamic_depth, table.layers())?;
    let f = g.constant(table.to_tensor(scale));
    let pf = g.tape.matmul(p, f)?;
    let weighted = g.tape.mul(pf, q)?;
    let total = g.tape.sum(weighted);
    Ok(g.tape.scale(total, dynamic_depth as Scalar / table.layers() as Scalar))
}
