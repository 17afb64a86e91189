//! Leave-one-out ranking metrics, model evaluation and the popularity baseline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Purpose, SequenceBatch, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Anything that scores every real item for each row of a batch.
///
/// `score_batch` returns `B x |V|` logits; column `j` belongs to item `j + 1`.
pub trait RankingModel {
    fn seq_len(&self) -> usize;
    fn score_batch(&self, batch: &SequenceBatch) -> Result<Tensor>;
}

/// Items (1-based) by descending logit, ties by ascending id.
pub fn rank_items(logits: &[Scalar], excluded: &[usize]) -> Vec<usize> {
    let excluded: HashSet<usize> = excluded.iter().copied().collect();
    let mut items: Vec<usize> = (1..=logits.len()).filter(|i| !excluded.contains(i)).collect();
    items.sort_by(|&a, &b| logits[b - 1].total_cmp(&logits[a - 1]).then(a.cmp(&b)));
    items
}

/// 1-based position of `target` under the [`rank_items`] order, without sorting.
pub fn target_rank(logits: &[Scalar], target: usize, excluded: &HashSet<usize>) -> Result<usize> {
    if target == 0 || target > logits.len() {
        return Err(Error::IdOutOfRange {
            id: target,
            max: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("ranking logits".into()));
    }
    let t = logits[target - 1];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| {
            let item = j + 1;
            item != target && !excluded.contains(&item) && (l > t || (l == t && item < target))
        })
        .count();
    Ok(ahead + 1)
}

/// `(recall, mrr, ndcg)` contribution of one target at `rank`.
pub fn metrics_at_k(rank: usize, k: usize) -> (Scalar, Scalar, Scalar) {
    if rank == 0 || rank > k {
        return (0.0, 0.0, 0.0);
    }
    let r = rank as Scalar;
    (1.0, 1.0 / r, 1.0 / (r + 1.0).log2())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub recall: Scalar,
    pub mrr: Scalar,
    pub ndcg: Scalar,
    pub examples: usize,
}

impl MetricsReport {
    /// Means of per-example contributions, summed in the given order.
    pub fn from_ranks(ranks: &[usize], k: usize) -> Self {
        let (mut r, mut m, mut n) = (0.0, 0.0, 0.0);
        for &rank in ranks {
            let (a, b, c) = metrics_at_k(rank, k);
            r += a;
            m += b;
            n += c;
        }
        let count = ranks.len().max(1) as Scalar;
        Self {
            k,
            recall: r / count,
            mrr: m / count,
            ndcg: n / count,
            examples: ranks.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub batch_size: usize,
    /// Drop items the user already interacted with (never the target itself).
    pub exclude_history: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            batch_size: 256,
            exclude_history: false,
        }
    }
}

fn history(split: &SplitSpec, user: usize, purpose: Purpose) -> HashSet<usize> {
    let us = &split.users[user];
    let mut h: HashSet<usize> = us.train.iter().copied().collect();
    if purpose == Purpose::Test {
        h.insert(us.valid_target);
    }
    h
}

/// Target ranks of every user for the validation or test target, in user order.
pub fn rank_targets(model: &dyn RankingModel, split: &SplitSpec, purpose: Purpose, cfg: &EvalConfig) -> Result<Vec<usize>> {
    if purpose == Purpose::Train {
        return Err(Error::Usage("evaluation runs on the validation or test targets".into()));
    }
    let no_rng = &mut rand::rngs::mock::StepRng::new(0, 0);
    let batches = make_batches(split, model.seq_len(), cfg.batch_size, purpose, false, no_rng)?;
    let mut ranks = Vec::with_capacity(split.users.len());
    let empty = HashSet::new();
    for batch in &batches {
        let logits = model.score_batch(batch)?;
        if logits.rows() != batch.len() || logits.cols() != split.num_items {
            return Err(Error::Shape {
                op: "score_batch",
                left: logits.shape().to_vec(),
                right: vec![batch.len(), split.num_items],
            });
        }
        for b in 0..batch.len() {
            let excluded = if cfg.exclude_history {
                history(split, batch.users[b], purpose)
            } else {
                empty.clone()
            };
            ranks.push(target_rank(logits.row_slice(b), batch.targets[b], &excluded)?);
        }
    }
    Ok(ranks)
}

pub fn evaluate_model(model: &dyn RankingModel, split: &SplitSpec, purpose: Purpose, cfg: &EvalConfig) -> Result<MetricsReport> {
    Ok(MetricsReport::from_ranks(&rank_targets(model, split, purpose, cfg)?, cfg.k))
}

/// Static ranking by training-prefix frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityModel {
    pub counts: Vec<u64>,
    pub seq_len: usize,
}

pub fn popularity_baseline(split: &SplitSpec) -> Result<PopularityModel> {
    let mut counts = vec![0u64; split.num_items];
    let mut any = false;
    for item in split.users.iter().flat_map(|u| &u.train) {
        counts[item - 1] += 1;
        any = true;
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    Ok(PopularityModel { counts, seq_len: 1 })
}

impl RankingModel for PopularityModel {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn score_batch(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let row: Vec<Scalar> = self.counts.iter().map(|&c| c as Scalar).collect();
        let data = (0..batch.len()).flat_map(|_| row.iter().copied()).collect();
        Tensor::new(vec![batch.len(), row.len()], data)
    }
}
