//! Bilevel search: alternating weight and controller updates under the
//! dynamic resource penalty, followed by hard selection.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Purpose, SequenceBatch, SplitSpec};
use crate::error::{Error, Result};
use crate::flops::{resource_loss, resource_loss_var, FlopsTable};
use crate::metrics::{evaluate_model, EvalConfig, MetricsReport, RankingModel};
use crate::model::ce_loss;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Graph, Mode, ParamGroup};
use crate::rng::{stream, Stream};
use crate::supernet::{FusionSpec, FusionWeights, GumbelMode, Supernet};
use crate::tensor::{Scalar, Tensor};

pub const MIN_TEMPERATURE: Scalar = 0.01;
pub const TEMPERATURE_DECAY: Scalar = 0.00005;

/// `tau = max(0.01, 1 - 0.00005 t)`.
pub fn temperature_at(t: u64) -> Scalar {
    (1.0 - TEMPERATURE_DECAY * t as Scalar).max(MIN_TEMPERATURE)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Depth implied by the strongest skip option (1-based).
pub fn update_dynamic_depth(beta: &[Scalar]) -> usize {
    argmax(beta) + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: Scalar,
    pub arch_learning_rate: Scalar,
    pub lambda: Scalar,
    pub search_batch: usize,
    pub retrain_batch: usize,
    pub max_epochs: usize,
    pub retrain_epochs: usize,
    pub patience: usize,
    /// Iterations between refreshes of the dynamic depth.
    pub refresh: u64,
    pub seed: u64,
    pub sliding: bool,
    pub retrain_sliding: bool,
    pub top_k: usize,
    pub exclude_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            arch_learning_rate: 1e-3,
            lambda: 0.1,
            search_batch: 1024,
            retrain_batch: 2048,
            max_epochs: 100,
            retrain_epochs: 100,
            patience: 10,
            refresh: 100,
            seed: 0,
            sliding: false,
            retrain_sliding: false,
            top_k: 10,
            exclude_history: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: Scalar| x > 0.0 && x.is_finite();
        if !positive(self.learning_rate) || !positive(self.arch_learning_rate) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.patience == 0 || self.refresh == 0 || self.top_k == 0 {
            return Err(Error::Config("patience, refresh and top_k must be >= 1".into()));
        }
        if self.search_batch == 0 || self.retrain_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self, batch_size: usize) -> EvalConfig {
        EvalConfig {
            k: self.top_k,
            batch_size,
            exclude_history: self.exclude_history,
        }
    }

    fn adam(&self, lr: Scalar) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchState {
    pub t: u64,
    pub tau: Scalar,
    pub dynamic_depth: usize,
    pub refresh: u64,
    pub epochs_without_improvement: usize,
}

/// One logged iteration (values of the weight step).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub t: u64,
    pub tau: Scalar,
    pub dynamic_depth: usize,
    pub ce: Scalar,
    pub rc: Scalar,
    pub p: Vec<Scalar>,
    pub q: Vec<Scalar>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub ce: Scalar,
    /// Unscaled penalty in FLOPs.
    pub rc: Scalar,
    pub fusion: FusionWeights,
}

/// Hard-selected architecture; serialized as the architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchChoice {
    /// 0-based candidate index.
    pub candidate_index: usize,
    pub gamma: Scalar,
    pub gamma_prime: Scalar,
    pub d_eff: usize,
    #[serde(rename = "D_eff")]
    pub inner_eff: usize,
    pub layers: usize,
    pub flops: u64,
    pub seed: u64,
}

impl ArchChoice {
    pub fn resolve(net: &Supernet, table: &FlopsTable, candidate: usize, depth: usize, seed: u64) -> Result<Self> {
        let mask = net
            .masks
            .get(candidate)
            .ok_or_else(|| Error::Validation(format!("candidate {candidate} does not exist")))?;
        if depth == 0 || depth > net.config.layers {
            return Err(Error::Validation(format!("depth {depth} outside [1, {}]", net.config.layers)));
        }
        Ok(Self {
            candidate_index: candidate,
            gamma: mask.gamma,
            gamma_prime: mask.gamma_prime,
            d_eff: mask.hidden_eff(),
            inner_eff: mask.inner_eff(),
            layers: depth,
            flops: table.get(candidate, depth),
            seed,
        })
    }
}

/// `(k1, L_o)` from the controller weights; both argmaxes break ties low.
pub fn hard_select(alpha: &[Scalar], beta: &[Scalar]) -> (usize, usize) {
    (argmax(alpha), argmax(beta) + 1)
}

pub struct SearchResult {
    pub choice: ArchChoice,
    pub supernet: Supernet,
    pub log: Vec<LogEntry>,
    pub epochs: usize,
    pub valid_history: Vec<MetricsReport>,
    pub wall_clock_secs: Scalar,
}

/// Scores with noise-free controller weights.
pub struct ExpectedScorer<'a>(pub &'a Supernet);

impl RankingModel for ExpectedScorer<'_> {
    fn seq_len(&self) -> usize {
        self.0.config.seq_len
    }

    fn score_batch(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut g = Graph::eval(&self.0.store);
        let spec = FusionSpec::Gumbel {
            tau: 1.0,
            mode: GumbelMode::Expected,
        };
        let out = self.0.forward(&mut g, batch, &spec, None)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Scores through one candidate's first `depth` layers.
pub struct HardPathScorer<'a> {
    pub net: &'a Supernet,
    pub candidate: usize,
    pub depth: usize,
}

impl RankingModel for HardPathScorer<'_> {
    fn seq_len(&self) -> usize {
        self.net.config.seq_len
    }

    fn score_batch(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut g = Graph::eval(&self.net.store);
        let logits = self.net.hard_forward(&mut g, batch, self.candidate, self.depth)?;
        Ok(g.value(logits).clone())
    }
}

/// Search loop state with separate optimizers for weights and controllers.
pub struct Searcher {
    pub net: Supernet,
    pub table: FlopsTable,
    pub cfg: TrainConfig,
    pub state: SearchState,
    pub log: Vec<LogEntry>,
    penalty_scale: Scalar,
    weight_adam: AdamState,
    arch_adam: AdamState,
    gumbel_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Searcher {
    pub fn new(net: Supernet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let table = FlopsTable::build(&net.config)?;
        let weight_adam = net.store.adam_for(ParamGroup::Weights, cfg.adam(cfg.learning_rate));
        let arch_adam = net.store.adam_for(ParamGroup::Architecture, cfg.adam(cfg.arch_learning_rate));
        Ok(Self {
            penalty_scale: table.max() as Scalar,
            table,
            state: SearchState {
                t: 0,
                tau: temperature_at(0),
                dynamic_depth: 1,
                refresh: cfg.refresh,
                epochs_without_improvement: 0,
            },
            log: Vec::new(),
            weight_adam,
            arch_adam,
            gumbel_rng: stream(cfg.seed, Stream::Gumbel),
            dropout_rng: stream(cfg.seed, Stream::Dropout),
            cfg,
            net,
        })
    }

    /// Divisor applied to FLOPs inside the loss (the largest table entry).
    pub fn penalty_scale(&self) -> Scalar {
        self.penalty_scale
    }

    fn diagnostic(&self, what: &str, fusion: &FusionWeights) -> Error {
        Error::NonFinite(format!(
            "{what} at t={} tau={} L_t={} p={:?} q={:?} alpha={:?} beta={:?}",
            self.state.t,
            self.state.tau,
            self.state.dynamic_depth,
            fusion.p,
            fusion.q,
            self.net.arch.alpha_logits(&self.net.store),
            self.net.arch.beta_logits(&self.net.store),
        ))
    }

    /// `L_CE + lambda L_RC` on `batch`, then an update of `group` only.
    fn step(&mut self, batch: &SequenceBatch, group: ParamGroup) -> Result<StepOutcome> {
        let spec = FusionSpec::Gumbel {
            tau: self.state.tau,
            mode: GumbelMode::Sample,
        };
        let (grads, ce, fusion) = {
            let mut g = Graph::new(&self.net.store, Mode::Train, Some(&mut self.dropout_rng));
            let out = self.net.forward(&mut g, batch, &spec, Some(&mut self.gumbel_rng))?;
            let ce = ce_loss(&mut g, out.logits, &batch.targets)?;
            let rc = resource_loss_var(&mut g, out.p, out.q, &self.table, self.state.dynamic_depth, self.penalty_scale)?;
            let penalty = g.tape.scale(rc, self.cfg.lambda);
            let loss = g.tape.add(ce, penalty)?;
            let ce_value = g.value(ce).data()[0];
            if !g.value(loss).all_finite() {
                return Err(self.diagnostic("non-finite loss", &out.fusion));
            }
            (g.param_grads(loss)?, ce_value, out.fusion)
        };
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(self.diagnostic("non-finite gradient", &fusion));
        }
        let adam = match group {
            ParamGroup::Weights => &mut self.weight_adam,
            ParamGroup::Architecture => &mut self.arch_adam,
        };
        self.net.store.apply_adam(group, adam, &grads)?;
        let rc = resource_loss(&fusion.p, &fusion.q, &self.table, self.state.dynamic_depth)?;
        Ok(StepOutcome { ce, rc, fusion })
    }

    pub fn weight_step(&mut self, batch: &SequenceBatch) -> Result<StepOutcome> {
        self.step(batch, ParamGroup::Weights)
    }

    pub fn arch_step(&mut self, batch: &SequenceBatch) -> Result<StepOutcome> {
        self.step(batch, ParamGroup::Architecture)
    }

    /// Refreshes `L_t` when due and sets the temperature for iteration `t`.
    pub fn begin_iteration(&mut self) {
        if self.state.t % self.state.refresh == 0 {
            let beta = self.net.arch.beta_logits(&self.net.store);
            self.state.dynamic_depth = update_dynamic_depth(beta);
        }
        self.state.tau = temperature_at(self.state.t);
    }

    /// One weight step on `train`, one controller step on `valid`, one log row.
    pub fn iteration(&mut self, train: &SequenceBatch, valid: &SequenceBatch) -> Result<&LogEntry> {
        self.begin_iteration();
        let w = self.weight_step(train)?;
        self.arch_step(valid)?;
        self.log.push(LogEntry {
            t: self.state.t,
            tau: self.state.tau,
            dynamic_depth: self.state.dynamic_depth,
            ce: w.ce,
            rc: w.rc,
            p: w.fusion.p,
            q: w.fusion.q,
        });
        self.state.t += 1;
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn hard_choice(&self) -> Result<ArchChoice> {
        let (k1, depth) = hard_select(
            self.net.arch.alpha_logits(&self.net.store),
            self.net.arch.beta_logits(&self.net.store),
        );
        ArchChoice::resolve(&self.net, &self.table, k1, depth, self.cfg.seed)
    }
}

/// Full search with data-pass epochs and validation Recall@k early stopping.
pub fn search(net: Supernet, split: &SplitSpec, cfg: &TrainConfig) -> Result<SearchResult> {
    let started = Instant::now();
    let mut searcher = Searcher::new(net, cfg.clone())?;
    let seq_len = searcher.net.config.seq_len;
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let valid = make_batches(split, seq_len, cfg.search_batch, Purpose::Valid, false, &mut shuffle)?;
    if valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eval_cfg = cfg.eval_config(cfg.search_batch.max(256));
    let mut best = Scalar::NEG_INFINITY;
    let mut history = Vec::new();
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        let train = make_batches(split, seq_len, cfg.search_batch, Purpose::Train, cfg.sliding, &mut shuffle)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for batch in &train {
            let v = &valid[(searcher.state.t % valid.len() as u64) as usize];
            searcher.iteration(batch, v)?;
        }
        epochs = epoch + 1;
        let report = evaluate_model(&ExpectedScorer(&searcher.net), split, Purpose::Valid, &eval_cfg)?;
        log::info!(
            "search epoch {epochs}: t={} tau={:.4} L_t={} valid recall@{}={:.4}",
            searcher.state.t,
            searcher.state.tau,
            searcher.state.dynamic_depth,
            report.k,
            report.recall
        );
        let improved = report.recall > best;
        history.push(report);
        if improved {
            best = history.last().expect("pushed").recall;
            searcher.state.epochs_without_improvement = 0;
        } else {
            searcher.state.epochs_without_improvement += 1;
            if searcher.state.epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }
    let choice = searcher.hard_choice()?;
    Ok(SearchResult {
        choice,
        log: searcher.log,
        supernet: searcher.net,
        epochs,
        valid_history: history,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
