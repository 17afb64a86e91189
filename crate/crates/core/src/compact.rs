//! Physically narrow model rebuilt from a hard-selected supernet path, and its
//! retraining loop.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Purpose, SequenceBatch, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, MetricsReport, RankingModel};
use crate::model::{block_forward, ce_loss, embed, score_items, BlockConfig, BlockMasks, BlockParams, EmbeddingParams, GateParams};
use crate::optim::AdamConfig;
use crate::params::{Graph, Mode, ParamGroup, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::search::{ArchChoice, TrainConfig};
use crate::supernet::Supernet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactConfig {
    pub num_items: usize,
    pub hidden: usize,
    pub inner: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub gate_layers: usize,
    pub dropout: Scalar,
    pub gate_scale: Scalar,
}

impl CompactConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            dropout: self.dropout,
            gate_scale: self.gate_scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompactModel {
    pub config: CompactConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
}

impl CompactModel {
    /// Freshly initialized model of the given shape.
    pub fn new(config: CompactConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.hidden % config.heads != 0 || config.layers == 0 {
            return Err(Error::Config(format!("invalid compact shape {config:?}")));
        }
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let embedding = EmbeddingParams::init(&mut store, "", config.num_items, config.seq_len, config.hidden, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| BlockParams::init(&mut store, &format!("layer{l}"), config.hidden, config.inner, config.gate_layers, &mut rng))
            .collect();
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SequenceBatch) -> Result<crate::autodiff::Var> {
        let (e, rows) = embed(g, &self.embedding, batch)?;
        let masks = BlockMasks::dense(self.config.hidden, self.config.heads);
        let cfg = self.config.block_config();
        let mut prev = e;
        for block in &self.blocks {
            prev = block_forward(g, block, &masks, &cfg, prev, e, rows)?;
        }
        score_items(g, prev, &self.embedding, rows)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.ids().map(|id| self.store.get(id).len()).sum()
    }
}

impl RankingModel for CompactModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn score_batch(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut g = Graph::eval(&self.store);
        let logits = self.forward(&mut g, batch)?;
        Ok(g.value(logits).clone())
    }
}

struct Slicer<'a> {
    src: &'a ParamStore,
    dst: ParamStore,
    hidden: Vec<usize>,
    inner: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Axis {
    All,
    Hidden,
    Inner,
}

impl Slicer<'_> {
    fn pick(&self, axis: Axis) -> Option<&[usize]> {
        match axis {
            Axis::All => None,
            Axis::Hidden => Some(&self.hidden),
            Axis::Inner => Some(&self.inner),
        }
    }

    fn copy(&mut self, id: ParamId, name: String, rows: Axis, cols: Axis) -> Result<ParamId> {
        let mut t = self.src.get(id).clone();
        if let Some(r) = self.pick(rows) {
            if r.iter().any(|&i| i >= t.rows()) {
                return Err(Error::Invariant(format!("row slice of {} exceeds {:?}", self.src.name(id), t.shape())));
            }
            t = t.select_rows(r);
        }
        if let Some(c) = self.pick(cols) {
            if c.iter().any(|&j| j >= t.cols()) {
                return Err(Error::Invariant(format!("column slice of {} exceeds {:?}", self.src.name(id), t.shape())));
            }
            t = t.select_cols(c);
        }
        Ok(self.dst.add(name, t, ParamGroup::Weights))
    }

    fn gate(&mut self, gate: &GateParams, prefix: &str, target: Axis) -> Result<GateParams> {
        let layers = gate
            .layers
            .iter()
            .enumerate()
            .map(|(l, &(w, b))| {
                let rows = if l == 0 { Axis::Hidden } else { target };
                Ok((
                    self.copy(w, format!("{prefix}.{l}.weight"), rows, target)?,
                    self.copy(b, format!("{prefix}.{l}.bias"), Axis::All, target)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(GateParams { layers })
    }

    fn block(&mut self, b: &BlockParams, prefix: &str) -> Result<BlockParams> {
        use Axis::*;
        let c = |s: &mut Self, id, name: &str, r, k| s.copy(id, format!("{prefix}.{name}"), r, k);
        Ok(BlockParams {
            wq: c(self, b.wq, "wq", Hidden, Hidden)?,
            wk: c(self, b.wk, "wk", Hidden, Hidden)?,
            wv: c(self, b.wv, "wv", Hidden, Hidden)?,
            wo: c(self, b.wo, "wo", Hidden, Hidden)?,
            attn_gain: c(self, b.attn_gain, "attn_gain", All, Hidden)?,
            attn_bias: c(self, b.attn_bias, "attn_bias", All, Hidden)?,
            ffn_w1: c(self, b.ffn_w1, "ffn_w1", Hidden, Inner)?,
            ffn_b1: c(self, b.ffn_b1, "ffn_b1", All, Inner)?,
            ffn_w2: c(self, b.ffn_w2, "ffn_w2", Inner, Hidden)?,
            ffn_b2: c(self, b.ffn_b2, "ffn_b2", All, Hidden)?,
            ffn_gain: c(self, b.ffn_gain, "ffn_gain", All, Hidden)?,
            ffn_bias: c(self, b.ffn_bias, "ffn_bias", All, Hidden)?,
            gate_hidden: self.gate(&b.gate_hidden, &format!("{prefix}.gate_hidden"), Hidden)?,
            gate_inner: self.gate(&b.gate_inner, &format!("{prefix}.gate_inner"), Inner)?,
        })
    }
}

/// Copies the surviving channels of candidate `choice.candidate_index`'s first
/// `choice.layers` blocks, its gates and the embeddings into narrow tensors.
pub fn build_compact_model(net: &Supernet, choice: &ArchChoice) -> Result<CompactModel> {
    let mask = net
        .masks
        .get(choice.candidate_index)
        .ok_or_else(|| Error::Validation(format!("candidate {} does not exist", choice.candidate_index)))?;
    if mask.hidden_eff() != choice.d_eff || mask.inner_eff() != choice.inner_eff {
        return Err(Error::Validation(format!(
            "descriptor widths ({}, {}) disagree with candidate masks ({}, {})",
            choice.d_eff,
            choice.inner_eff,
            mask.hidden_eff(),
            mask.inner_eff()
        )));
    }
    if choice.layers == 0 || choice.layers > net.config.layers {
        return Err(Error::Validation(format!("descriptor depth {} outside [1, {}]", choice.layers, net.config.layers)));
    }
    let mut s = Slicer {
        src: &net.store,
        dst: ParamStore::new(),
        hidden: mask.hidden_active(),
        inner: mask.inner_active(),
    };
    let items = {
        let t = net.store.get(net.embedding.items).select_cols(&s.hidden);
        s.dst.add_padded_table("item_embedding", t)
    };
    let positions = s.copy(net.embedding.positions, "position_embedding".into(), Axis::All, Axis::Hidden)?;
    let blocks = net.blocks[choice.candidate_index][..choice.layers]
        .iter()
        .enumerate()
        .map(|(l, b)| s.block(b, &format!("layer{l}")))
        .collect::<Result<Vec<_>>>()?;
    let c = &net.config;
    Ok(CompactModel {
        config: CompactConfig {
            num_items: c.num_items,
            hidden: choice.d_eff,
            inner: choice.inner_eff,
            seq_len: c.seq_len,
            layers: choice.layers,
            heads: c.heads,
            gate_layers: c.gate_layers,
            dropout: c.dropout,
            gate_scale: c.gate_scale,
        },
        store: s.dst,
        embedding: EmbeddingParams { items, positions },
        blocks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrainReport {
    /// Validation metrics of the transferred weights before any update.
    pub initial_valid: MetricsReport,
    pub best_valid: MetricsReport,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Mean training cross-entropy of every epoch.
    pub train_losses: Vec<Scalar>,
    pub valid_recalls: Vec<Scalar>,
}

/// Cross-entropy training with validation Recall@k early stopping; the best
/// weights are restored at the end.
pub fn retrain(model: &mut CompactModel, split: &SplitSpec, cfg: &TrainConfig) -> Result<RetrainReport> {
    cfg.validate()?;
    let eval_cfg = cfg.eval_config(cfg.retrain_batch.max(256));
    let initial_valid = evaluate_model(model, split, Purpose::Valid, &eval_cfg)?;
    let mut adam = model.store.adam_for(
        ParamGroup::Weights,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut dropout = stream(cfg.seed, Stream::Dropout);
    let mut best = (initial_valid.clone(), 0usize, model.store.clone());
    let (mut train_losses, mut valid_recalls) = (Vec::new(), Vec::new());
    let mut stale = 0;
    let mut epochs = 0;
    for epoch in 1..=cfg.retrain_epochs {
        let batches = make_batches(split, model.config.seq_len, cfg.retrain_batch, Purpose::Train, cfg.retrain_sliding, &mut shuffle)?;
        if batches.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for batch in &batches {
            let (grads, loss) = {
                let mut g = Graph::new(&model.store, Mode::Train, Some(&mut dropout));
                let logits = model.forward(&mut g, batch)?;
                let loss = ce_loss(&mut g, logits, &batch.targets)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("retrain loss at epoch {epoch}")));
                }
                (g.param_grads(loss)?, value)
            };
            model.store.apply_adam(ParamGroup::Weights, &mut adam, &grads)?;
            total += loss;
        }
        epochs = epoch;
        train_losses.push(total / batches.len() as Scalar);
        let report = evaluate_model(model, split, Purpose::Valid, &eval_cfg)?;
        log::info!(
            "retrain epoch {epoch}: loss={:.4} valid recall@{}={:.4}",
            train_losses.last().expect("pushed"),
            report.k,
            report.recall
        );
        valid_recalls.push(report.recall);
        if report.recall > best.0.recall {
            best = (report, epoch, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_valid, best_epoch, store) = best;
    model.store = store;
    Ok(RetrainReport {
        initial_valid,
        best_valid,
        best_epoch,
        epochs,
        train_losses,
        valid_recalls,
    })
}
