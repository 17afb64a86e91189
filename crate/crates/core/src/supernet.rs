//! The m-candidate, L-layer supernet with its width (alpha) and depth (beta)
//! controllers, Gumbel-softmax decision weights and output fusion.

use std::fmt;

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::{
    block_forward, embed, score_items, BlockConfig, BlockMasks, BlockParams, EmbeddingParams, MaskSpec, Rows,
};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub num_items: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    /// Inner width `D`.
    pub inner: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub gammas: Vec<Scalar>,
    pub gamma_primes: Vec<Scalar>,
    pub gate_layers: usize,
    pub dropout: Scalar,
    pub gate_scale: Scalar,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            num_items: 100,
            hidden: 128,
            inner: 256,
            seq_len: 200,
            layers: 4,
            heads: 4,
            gammas: vec![0.0, 0.25, 0.5],
            gamma_primes: vec![0.0, 0.25, 0.5],
            gate_layers: 2,
            dropout: 0.2,
            gate_scale: 2.0,
        }
    }
}

pub const MAX_GATE_LAYERS: usize = 4;

impl SupernetConfig {
    pub fn candidates(&self) -> usize {
        self.gammas.len()
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            dropout: self.dropout,
            gate_scale: self.gate_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.gammas.is_empty() || self.gammas.len() != self.gamma_primes.len() {
            return bad(format!(
                "need matching, non-empty intensity lists (got {} and {})",
                self.gammas.len(),
                self.gamma_primes.len()
            ));
        }
        if let Some(g) = self.gammas.iter().chain(&self.gamma_primes).find(|g| !(0.0..1.0).contains(*g)) {
            return bad(format!("pruning intensity {g} outside [0, 1)"));
        }
        if self.layers == 0 || self.num_items == 0 || self.seq_len == 0 || self.inner == 0 {
            return bad("layers, num_items, seq_len and inner must be positive".into());
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden width {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.gate_layers > MAX_GATE_LAYERS {
            return bad(format!("gate_layers {} exceeds {MAX_GATE_LAYERS}", self.gate_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.gate_scale > 0.0) {
            return bad(format!("gate_scale {} must be positive", self.gate_scale));
        }
        Ok(())
    }
}

/// Builds the trailing zero masks of every candidate.
///
/// Hidden zero counts that do not split evenly over the heads are rounded
/// down to the nearest multiple of the head count; every head and the inner
/// layer keep at least one channel.
pub fn make_masks(cfg: &SupernetConfig) -> Result<Vec<MaskSpec>> {
    cfg.validate()?;
    let heads = cfg.heads;
    cfg.gammas
        .iter()
        .zip(&cfg.gamma_primes)
        .map(|(&gamma, &gamma_prime)| {
            let wanted = (gamma * cfg.hidden as Scalar).round() as usize;
            let mut hidden_zeros = wanted / heads * heads;
            hidden_zeros = hidden_zeros.min(cfg.hidden - heads);
            if hidden_zeros != wanted {
                log::warn!(
                    "gamma {gamma}: {wanted} hidden zeros adjusted to {hidden_zeros} for {heads} heads of width {}",
                    cfg.hidden / heads
                );
            }
            let wanted_inner = (gamma_prime * cfg.inner as Scalar).round() as usize;
            let inner_zeros = wanted_inner.min(cfg.inner - 1);
            if inner_zeros != wanted_inner {
                log::warn!("gamma' {gamma_prime}: inner zeros capped at {inner_zeros}");
            }
            Ok(MaskSpec {
                gamma,
                gamma_prime,
                hidden: cfg.hidden,
                inner: cfg.inner,
                heads,
                hidden_zeros,
                inner_zeros,
            })
        })
        .collect()
}

/// Free logits of the controllers; `alpha = exp(alpha_logits)`,
/// `beta = exp(beta_logits)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchParams {
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl ArchParams {
    pub fn alpha_logits<'s>(&self, store: &'s ParamStore) -> &'s [Scalar] {
        store.get(self.alpha).data()
    }

    pub fn beta_logits<'s>(&self, store: &'s ParamStore) -> &'s [Scalar] {
        store.get(self.beta).data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GumbelMode {
    Sample,
    Expected,
}

/// How the decision weights of one forward are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionSpec {
    Gumbel { tau: Scalar, mode: GumbelMode },
    /// Constant simplex vectors (no gradient reaches the controllers).
    Fixed { p: Vec<Scalar>, q: Vec<Scalar> },
}

impl FusionSpec {
    pub fn one_hot(m: usize, candidate: usize, layers: usize, depth: usize) -> Self {
        let hot = |n: usize, k: usize| (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        FusionSpec::Fixed {
            p: hot(m, candidate),
            q: hot(layers, depth - 1),
        }
    }
}

/// Decision weights used by one forward, together with their Gumbel draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionWeights {
    pub p: Vec<Scalar>,
    pub q: Vec<Scalar>,
    pub gumbel_p: Vec<Scalar>,
    pub gumbel_q: Vec<Scalar>,
}

fn check_tau(tau: Scalar) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {tau} must be positive")))
    }
}

/// `g = -log(-log u)` with `u ~ Uniform(0, 1)`.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<Scalar> {
    (0..n)
        .map(|_| {
            let u: Scalar = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((log w + g) / tau)` for positive weights `w`; the noise is
/// omitted in expected mode or when no generator is supplied.
pub fn gumbel_softmax(weights: &[Scalar], tau: Scalar, rng: Option<&mut ChaCha8Rng>, mode: GumbelMode) -> Result<Vec<Scalar>> {
    check_tau(tau)?;
    if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("gumbel weights must be positive, got {weights:?}")));
    }
    let noise = match (mode, rng) {
        (GumbelMode::Sample, Some(r)) => gumbel_noise(r, weights.len()),
        _ => vec![0.0; weights.len()],
    };
    let mut z: Vec<Scalar> = weights.iter().zip(&noise).map(|(w, g)| (w.ln() + g) / tau).collect();
    crate::autodiff::softmax_in_place(&mut z);
    Ok(z)
}

pub struct SupernetOutput {
    /// `B x |V|`
    pub logits: Var,
    pub p: Var,
    pub q: Var,
    pub fusion: FusionWeights,
}

pub struct Supernet {
    pub config: SupernetConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    /// `blocks[i][l]`: candidate `i` at layer `l`.
    pub blocks: Vec<Vec<BlockParams>>,
    pub masks: Vec<MaskSpec>,
    pub arch: ArchParams,
    block_masks: Vec<BlockMasks>,
}

impl fmt::Debug for Supernet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Supernet")
            .field("config", &self.config)
            .field("masks", &self.masks)
            .field("params", &self.store.len())
            .finish()
    }
}

impl Supernet {
    /// Initializes every weight from the `Init` stream of `seed`; both
    /// controllers start uniform.
    pub fn new(config: SupernetConfig, seed: u64) -> Result<Self> {
        let masks = make_masks(&config)?;
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let embedding = EmbeddingParams::init(&mut store, "", config.num_items, config.seq_len, config.hidden, &mut rng);
        let blocks = (0..config.candidates())
            .map(|i| {
                (0..config.layers)
                    .map(|l| {
                        BlockParams::init(
                            &mut store,
                            &format!("cand{i}.layer{l}"),
                            config.hidden,
                            config.inner,
                            config.gate_layers,
                            &mut rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let arch = ArchParams {
            alpha: store.add("arch.alpha", Tensor::zeros(&[1, config.candidates()]), ParamGroup::Architecture),
            beta: store.add("arch.beta", Tensor::zeros(&[1, config.layers]), ParamGroup::Architecture),
        };
        let block_masks = masks.iter().map(BlockMasks::from_spec).collect();
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
            masks,
            arch,
            block_masks,
        })
    }

    pub fn block_masks(&self, candidate: usize) -> &BlockMasks {
        &self.block_masks[candidate]
    }

    fn fusion_vars(
        &self,
        g: &mut Graph<'_>,
        spec: &FusionSpec,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, FusionWeights)> {
        let (m, layers) = (self.config.candidates(), self.config.layers);
        match spec {
            FusionSpec::Fixed { p, q } => {
                if p.len() != m || q.len() != layers {
                    return Err(Error::Usage(format!(
                        "fixed fusion expects {m} + {layers} weights, got {} + {}",
                        p.len(),
                        q.len()
                    )));
                }
                let pv = g.constant(Tensor::row(p));
                let qv = g.constant(Tensor::row(q));
                let fw = FusionWeights {
                    p: p.clone(),
                    q: q.clone(),
                    gumbel_p: vec![0.0; m],
                    gumbel_q: vec![0.0; layers],
                };
                Ok((pv, qv, fw))
            }
            &FusionSpec::Gumbel { tau, mode } => {
                check_tau(tau)?;
                let (gp, gq) = match (mode, rng) {
                    (GumbelMode::Sample, Some(r)) => {
                        let gp = gumbel_noise(r, m);
                        (gp, gumbel_noise(r, layers))
                    }
                    (GumbelMode::Sample, None) => {
                        return Err(Error::Usage("gumbel sampling needs a generator".into()))
                    }
                    (GumbelMode::Expected, _) => (vec![0.0; m], vec![0.0; layers]),
                };
                let relaxed = |g: &mut Graph<'_>, id: ParamId, noise: &[Scalar]| -> Result<Var> {
                    let logits = g.param(id);
                    let noise = g.constant(Tensor::row(noise));
                    let z = g.tape.add(logits, noise)?;
                    let z = g.tape.scale(z, 1.0 / tau);
                    Ok(g.tape.softmax_rows(z))
                };
                let pv = relaxed(g, self.arch.alpha, &gp)?;
                let qv = relaxed(g, self.arch.beta, &gq)?;
                let fw = FusionWeights {
                    p: g.value(pv).data().to_vec(),
                    q: g.value(qv).data().to_vec(),
                    gumbel_p: gp,
                    gumbel_q: gq,
                };
                Ok((pv, qv, fw))
            }
        }
    }

    /// `Y = sum_j q_j T^(j)` with `T^(l) = sum_i p_i T_i^(l)` and `T^(0) = E`.
    /// One `(p, q)` draw serves the whole forward.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &SequenceBatch,
        spec: &FusionSpec,
        gumbel_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SupernetOutput> {
        let (p, q, fusion) = self.fusion_vars(g, spec, gumbel_rng)?;
        let (e, rows) = embed(g, &self.embedding, batch)?;
        let cfg = self.config.block_config();
        let mut prev = e;
        let mut y: Option<Var> = None;
        for l in 0..self.config.layers {
            let mut fused: Option<Var> = None;
            for (i, cand) in self.blocks.iter().enumerate() {
                let t = block_forward(g, &cand[l], &self.block_masks[i], &cfg, prev, e, rows)?;
                let pi = g.tape.index(p, i);
                let w = g.tape.scale_by(t, pi)?;
                fused = Some(match fused {
                    None => w,
                    Some(acc) => g.tape.add(acc, w)?,
                });
            }
            prev = fused.expect("at least one candidate");
            let ql = g.tape.index(q, l);
            let w = g.tape.scale_by(prev, ql)?;
            y = Some(match y {
                None => w,
                Some(acc) => g.tape.add(acc, w)?,
            });
        }
        let logits = score_items(g, y.expect("at least one layer"), &self.embedding, rows)?;
        Ok(SupernetOutput { logits, p, q, fusion })
    }

    /// Runs candidate `candidate` alone for its first `depth` layers (masked,
    /// full-width tensors).
    pub fn hard_forward(&self, g: &mut Graph<'_>, batch: &SequenceBatch, candidate: usize, depth: usize) -> Result<Var> {
        if candidate >= self.config.candidates() || depth == 0 || depth > self.config.layers {
            return Err(Error::Usage(format!(
                "hard path ({candidate}, {depth}) outside {} candidates x {} layers",
                self.config.candidates(),
                self.config.layers
            )));
        }
        let (e, rows) = embed(g, &self.embedding, batch)?;
        let y = self.hard_layers(g, e, rows, candidate, depth)?;
        score_items(g, y, &self.embedding, rows)
    }

    fn hard_layers(&self, g: &mut Graph<'_>, e: Var, rows: Rows, candidate: usize, depth: usize) -> Result<Var> {
        let cfg = self.config.block_config();
        let mut prev = e;
        for block in &self.blocks[candidate][..depth] {
            prev = block_forward(g, block, &self.block_masks[candidate], &cfg, prev, e, rows)?;
        }
        Ok(prev)
    }
}
