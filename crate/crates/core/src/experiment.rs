//! Run orchestration and artifact writing for every pipeline stage.
//!
//! Each stage writes into a run directory; all files are written atomically
//! and contain no wall-clock data, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::compact::{build_compact_model, retrain, CompactModel, RetrainReport};
use crate::config::RunConfig;
use crate::data::{leave_one_out_split, load_interactions, InteractionDataset, Purpose, SplitSpec};
use crate::error::{Error, Result};
use crate::flops::FlopsTable;
use crate::io::{sha256_hex, write_atomic};
use crate::metrics::{evaluate_model, popularity_baseline, MetricsReport};
use crate::search::{search, ArchChoice, HardPathScorer, LogEntry, SearchResult};
use crate::supernet::{Supernet, SupernetConfig};
use crate::tensor::Scalar;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";
pub const DESCRIPTOR: &str = "descriptor.json";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const COMPACT_CKPT: &str = "compact.ckpt";
pub const FLOPS_CSV: &str = "flops.csv";
pub const RETRAIN_REPORT: &str = "retrain_report.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const DIVERGENCE_DUMP: &str = "divergence.txt";
const RESULTS_HEADER: &str = "run_id,split,k,recall,mrr,ndcg,flops,seed\n";

/// Loaded interactions plus the content hash of whatever produced them.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: InteractionDataset,
    pub split: SplitSpec,
    pub input_hash: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let (dataset, input_hash) = match &cfg.data {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            (load_interactions(path, cfg.format)?, sha256_hex(&bytes))
        }
        None => {
            let spec = &cfg.synthetic;
            let desc = format!(
                "markov users={} items={} len={}..{} probs={:?} seed={}",
                spec.users, spec.items, spec.min_len, spec.max_len, spec.successor_probs, spec.seed
            );
            (spec.dataset()?, sha256_hex(desc.as_bytes()))
        }
    };
    let split = leave_one_out_split(&dataset)?;
    Ok(PreparedData {
        dataset,
        split,
        input_hash,
    })
}

pub fn supernet_config(cfg: &RunConfig, data: &PreparedData) -> SupernetConfig {
    SupernetConfig {
        num_items: data.dataset.num_items,
        ..cfg.supernet.clone()
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.push(b'\n');
    Ok(s)
}

#[derive(Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    seed: u64,
    input_sha256: &'a str,
    config_sha256: String,
    users: usize,
    items: usize,
    interactions: usize,
}

/// Writes the resolved config and a manifest tying outputs to their inputs.
pub fn write_run_header(dir: &Path, cfg: &RunConfig, data: &PreparedData, stage: &str) -> Result<()> {
    let text = cfg.to_text();
    write_atomic(&dir.join(RESOLVED_CONFIG), text.as_bytes())?;
    let manifest = Manifest {
        stage,
        seed: cfg.train.seed,
        input_sha256: &data.input_hash,
        config_sha256: sha256_hex(text.as_bytes()),
        users: data.dataset.num_users(),
        items: data.dataset.num_items,
        interactions: data.dataset.num_interactions(),
    };
    write_atomic(&dir.join(MANIFEST), &to_json(&manifest)?)
}

/// Stable identifier of a run: a prefix of the resolved-config hash, taken
/// without the output directory so relocated reruns keep their id.
pub fn run_id(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    sha256_hex(c.to_text().as_bytes())[..12].to_string()
}

#[derive(Serialize)]
struct SplitSummary {
    users: usize,
    items: usize,
    interactions: usize,
    train_items: usize,
    valid_examples: usize,
    test_examples: usize,
}

/// Writes the id remapping sidecar, a split summary and, for generated data,
/// the interaction file itself.
pub fn write_prepared(dir: &Path, cfg: &RunConfig, data: &PreparedData) -> Result<()> {
    write_run_header(dir, cfg, data, "prepare-data")?;
    write_atomic(&dir.join("id_map.json"), &to_json(&data.dataset.id_map)?)?;
    let summary = SplitSummary {
        users: data.dataset.num_users(),
        items: data.dataset.num_items,
        interactions: data.dataset.num_interactions(),
        train_items: data.split.users.iter().map(|u| u.train.len()).sum(),
        valid_examples: data.split.users.len(),
        test_examples: data.split.users.len(),
    };
    write_atomic(&dir.join("split.json"), &to_json(&summary)?)?;
    if cfg.data.is_none() {
        cfg.synthetic.write_tsv(&dir.join("interactions.tsv"))?;
    }
    Ok(())
}

pub fn log_csv(log: &[LogEntry], m: usize, layers: usize) -> String {
    let mut out = String::from("t,tau,L_t,L_CE,L_RC");
    (1..=m).for_each(|i| write!(out, ",p{i}").expect("string write"));
    (1..=layers).for_each(|j| write!(out, ",q{j}").expect("string write"));
    out.push('\n');
    for e in log {
        write!(out, "{},{},{},{},{}", e.t, e.tau, e.dynamic_depth, e.ce, e.rc).expect("string write");
        for x in e.p.iter().chain(&e.q) {
            write!(out, ",{x}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub struct SearchArtifacts {
    pub result: SearchResult,
    pub dir: PathBuf,
}

/// Runs the search and writes descriptor, log, FLOPs table and checkpoint.
pub fn run_search(cfg: &RunConfig, data: &PreparedData, dir: &Path) -> Result<SearchArtifacts> {
    cfg.validate()?;
    write_run_header(dir, cfg, data, "search")?;
    let net_cfg = supernet_config(cfg, data);
    let table = FlopsTable::build(&net_cfg)?;
    write_atomic(&dir.join(FLOPS_CSV), table.to_csv().as_bytes())?;
    let net = Supernet::new(net_cfg.clone(), cfg.train.seed)?;
    let result = match search(net, &data.split, &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::NonFinite(_)) => {
            write_atomic(&dir.join(DIVERGENCE_DUMP), format!("{e}\n").as_bytes())?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    log::info!(
        "search finished in {:.1}s after {} epochs: {:?}",
        result.wall_clock_secs,
        result.epochs,
        result.choice
    );
    write_atomic(&dir.join(DESCRIPTOR), &to_json(&result.choice)?)?;
    write_atomic(
        &dir.join(SEARCH_LOG),
        log_csv(&result.log, net_cfg.candidates(), net_cfg.layers).as_bytes(),
    )?;
    checkpoint::save_store(&dir.join(SUPERNET_CKPT), &result.supernet.store)?;
    let back: ArchChoice = serde_json::from_slice(&std::fs::read(dir.join(DESCRIPTOR))?)?;
    if back != result.choice {
        return Err(Error::Validation("descriptor did not round-trip".into()));
    }
    checkpoint::read(&dir.join(SUPERNET_CKPT))?;
    Ok(SearchArtifacts {
        result,
        dir: dir.to_path_buf(),
    })
}

pub fn read_descriptor(path: &Path) -> Result<ArchChoice> {
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Rejects a descriptor whose widths or depth do not match the configured candidates.
fn check_descriptor(net_cfg: &SupernetConfig, choice: &ArchChoice) -> Result<()> {
    let masks = crate::supernet::make_masks(net_cfg)?;
    let mask = masks.get(choice.candidate_index).ok_or_else(|| {
        Error::Validation(format!(
            "descriptor candidate {} but config has {} candidates",
            choice.candidate_index,
            masks.len()
        ))
    })?;
    if (mask.hidden_eff(), mask.inner_eff()) != (choice.d_eff, choice.inner_eff) || choice.layers == 0 || choice.layers > net_cfg.layers {
        return Err(Error::Validation(format!(
            "descriptor (d_eff {}, D_eff {}, layers {}) does not match config (d_eff {}, D_eff {}, layers <= {})",
            choice.d_eff,
            choice.inner_eff,
            choice.layers,
            mask.hidden_eff(),
            mask.inner_eff(),
            net_cfg.layers
        )));
    }
    Ok(())
}

/// Rebuilds the supernet from a checkpoint after checking that the descriptor,
/// the config and the checkpoint agree. Nothing is trained before the checks pass.
pub fn load_supernet(cfg: &RunConfig, data: &PreparedData, choice: &ArchChoice, ckpt: &Path) -> Result<Supernet> {
    let net_cfg = supernet_config(cfg, data);
    check_descriptor(&net_cfg, choice)?;
    let tensors = checkpoint::read(ckpt)?;
    let wq = format!("cand{}.layer0.wq", choice.candidate_index);
    match tensors.iter().find(|(n, _)| *n == wq) {
        Some((_, t)) if t.shape() == [net_cfg.hidden, net_cfg.hidden] => {}
        Some((_, t)) => {
            return Err(Error::Validation(format!(
                "checkpoint {wq} has shape {:?}, descriptor and config imply [{h}, {h}]",
                t.shape(),
                h = net_cfg.hidden
            )))
        }
        None => return Err(Error::Validation(format!("checkpoint lacks {wq}"))),
    }
    let mut net = Supernet::new(net_cfg, choice.seed)?;
    checkpoint::load_into(&mut net.store, tensors)?;
    Ok(net)
}

fn results_row(id: &str, split: &str, r: &MetricsReport, flops: u64, seed: u64) -> String {
    format!("{id},{split},{},{},{},{},{flops},{seed}\n", r.k, r.recall, r.mrr, r.ndcg)
}

/// Appends rows to the results ledger, creating it with a header.
pub fn append_results(dir: &Path, rows: &[String]) -> Result<()> {
    let path = dir.join(RESULTS_CSV);
    let mut text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => RESULTS_HEADER.to_string(),
        Err(e) => return Err(e.into()),
    };
    rows.iter().for_each(|r| text.push_str(r));
    write_atomic(&path, text.as_bytes())
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainArtifacts {
    pub choice: ArchChoice,
    pub report: RetrainReport,
    pub hard_path_valid: MetricsReport,
    pub test: MetricsReport,
    pub popularity_test: MetricsReport,
    pub parameters: usize,
}

/// Compacts the chosen path, retrains it and evaluates it on the test targets.
pub fn run_retrain(cfg: &RunConfig, data: &PreparedData, net: &Supernet, choice: &ArchChoice, dir: &Path) -> Result<(CompactModel, RetrainArtifacts)> {
    write_run_header(dir, cfg, data, "retrain")?;
    let eval_cfg = cfg.train.eval_config(cfg.train.retrain_batch.max(256));
    let hard = HardPathScorer {
        net,
        candidate: choice.candidate_index,
        depth: choice.layers,
    };
    let hard_path_valid = evaluate_model(&hard, &data.split, Purpose::Valid, &eval_cfg)?;
    let mut model = build_compact_model(net, choice)?;
    let report = retrain(&mut model, &data.split, &cfg.train)?;
    let test = evaluate_model(&model, &data.split, Purpose::Test, &eval_cfg)?;
    let popularity_test = evaluate_model(&popularity_baseline(&data.split)?, &data.split, Purpose::Test, &eval_cfg)?;
    let artifacts = RetrainArtifacts {
        choice: choice.clone(),
        report,
        hard_path_valid,
        test,
        popularity_test,
        parameters: model.parameter_count(),
    };
    checkpoint::save_store(&dir.join(COMPACT_CKPT), &model.store)?;
    write_atomic(&dir.join(RETRAIN_REPORT), &to_json(&artifacts)?)?;
    write_atomic(&dir.join("metrics_test.json"), &to_json(&artifacts.test)?)?;
    let id = run_id(cfg);
    append_results(
        dir,
        &[
            results_row(&id, "test", &artifacts.test, choice.flops, cfg.train.seed),
            results_row(&format!("{id}-popularity"), "test", &artifacts.popularity_test, 0, cfg.train.seed),
        ],
    )?;
    Ok((model, artifacts))
}

/// Loads a compact model from its descriptor and checkpoint.
pub fn load_compact(cfg: &RunConfig, data: &PreparedData, choice: &ArchChoice, ckpt: &Path) -> Result<CompactModel> {
    check_descriptor(&supernet_config(cfg, data), choice)?;
    let c = &cfg.supernet;
    let mut model = CompactModel::new(
        crate::compact::CompactConfig {
            num_items: data.dataset.num_items,
            hidden: choice.d_eff,
            inner: choice.inner_eff,
            seq_len: c.seq_len,
            layers: choice.layers,
            heads: c.heads,
            gate_layers: c.gate_layers,
            dropout: c.dropout,
            gate_scale: c.gate_scale,
        },
        choice.seed,
    )?;
    checkpoint::load_into(&mut model.store, checkpoint::read(ckpt)?)?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunAllSummary {
    pub choice: ArchChoice,
    pub test: MetricsReport,
    pub popularity_test: MetricsReport,
    pub random_expectation: Scalar,
}

/// prepare-data, search, retrain and evaluation in one directory.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<RunAllSummary> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    write_prepared(dir, cfg, &data)?;
    let searched = run_search(cfg, &data, dir)?;
    let choice = searched.result.choice.clone();
    let (_, art) = run_retrain(cfg, &data, &searched.result.supernet, &choice, dir)?;
    write_run_header(dir, cfg, &data, "run-all")?;
    let summary = RunAllSummary {
        choice,
        test: art.test,
        popularity_test: art.popularity_test,
        random_expectation: cfg.train.top_k as Scalar / data.dataset.num_items as Scalar,
    };
    write_atomic(&dir.join("summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

fn median(xs: &mut [u64]) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn run_points<T: Send>(parallel: bool, points: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Result<Vec<T>> {
    if !parallel {
        return points.into_iter().map(|f| f()).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = points.into_iter().map(|f| s.spawn(f)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("sweep worker panicked".into()))))
            .collect()
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaPoint {
    pub lambda: Scalar,
    pub seed: u64,
    pub choice: ArchChoice,
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaSweep {
    pub points: Vec<LambdaPoint>,
    /// `(lambda, median selected FLOPs over seeds)` in sweep order.
    pub medians: Vec<(Scalar, u64)>,
    pub non_increasing: bool,
}

/// One search per `(lambda, seed)` in `dir/lambda_<l>/seed_<s>/`.
pub fn sweep_lambda(cfg: &RunConfig, dir: &Path) -> Result<LambdaSweep> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    write_run_header(dir, cfg, &data, "sweep-lambda")?;
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<LambdaPoint> + Send + '_>> = Vec::new();
    for &lambda in &cfg.sweep_lambdas {
        for &seed in &cfg.sweep_seeds {
            let mut point = cfg.clone();
            point.train.lambda = lambda;
            point.train.seed = seed;
            let sub = dir.join(format!("lambda_{lambda}")).join(format!("seed_{seed}"));
            point.output = sub.clone();
            let data = &data;
            jobs.push(Box::new(move || {
                let art = run_search(&point, data, &sub)?;
                Ok(LambdaPoint {
                    lambda,
                    seed,
                    choice: art.result.choice,
                })
            }));
        }
    }
    let points = run_points(cfg.parallel, jobs)?;
    let medians: Vec<(Scalar, u64)> = cfg
        .sweep_lambdas
        .iter()
        .map(|&l| {
            let mut f: Vec<u64> = points.iter().filter(|p| p.lambda == l).map(|p| p.choice.flops).collect();
            (l, median(&mut f))
        })
        .collect();
    let non_increasing = medians.windows(2).all(|w| w[1].1 <= w[0].1);
    let mut csv = String::from("lambda,seed,candidate_index,layers,d_eff,D_eff,flops\n");
    for p in &points {
        let c = &p.choice;
        writeln!(csv, "{},{},{},{},{},{},{}", p.lambda, p.seed, c.candidate_index, c.layers, c.d_eff, c.inner_eff, c.flops).expect("string write");
    }
    write_atomic(&dir.join("sweep_lambda.csv"), csv.as_bytes())?;
    let sweep = LambdaSweep {
        points,
        medians,
        non_increasing,
    };
    write_atomic(&dir.join("sweep_lambda.json"), &to_json(&sweep)?)?;
    Ok(sweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct GatePoint {
    pub gate_layers: usize,
    pub seed: u64,
    pub choice: ArchChoice,
    pub test: MetricsReport,
    /// FLOPs of the unpruned candidate at full depth; isolates the gate cost.
    pub reference_flops: u64,
}

/// Search plus retraining for every gate depth in `dir/gate_<L_d>/seed_<s>/`.
pub fn sweep_gate_depth(cfg: &RunConfig, dir: &Path) -> Result<Vec<GatePoint>> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    write_run_header(dir, cfg, &data, "sweep-gate-depth")?;
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<GatePoint> + Send + '_>> = Vec::new();
    for &gate_layers in &cfg.sweep_gate_layers {
        for &seed in &cfg.sweep_seeds {
            let mut point = cfg.clone();
            point.supernet.gate_layers = gate_layers;
            point.train.seed = seed;
            let sub = dir.join(format!("gate_{gate_layers}")).join(format!("seed_{seed}"));
            point.output = sub.clone();
            let data = &data;
            jobs.push(Box::new(move || {
                point.validate()?;
                let reference = FlopsTable::build(&SupernetConfig {
                    gammas: vec![0.0],
                    gamma_primes: vec![0.0],
                    ..supernet_config(&point, data)
                })?;
                let art = run_search(&point, data, &sub)?;
                let choice = art.result.choice.clone();
                let (_, r) = run_retrain(&point, data, &art.result.supernet, &choice, &sub)?;
                Ok(GatePoint {
                    gate_layers,
                    seed,
                    choice,
                    test: r.test,
                    reference_flops: reference.max(),
                })
            }));
        }
    }
    let points = run_points(cfg.parallel, jobs)?;
    let mut csv = String::from("gate_layers,seed,candidate_index,layers,flops,reference_flops,recall,mrr,ndcg\n");
    for p in &points {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            p.gate_layers, p.seed, p.choice.candidate_index, p.choice.layers, p.choice.flops, p.reference_flops, p.test.recall, p.test.mrr, p.test.ndcg
        )
        .expect("string write");
    }
    write_atomic(&dir.join("sweep_gate_depth.csv"), csv.as_bytes())?;
    Ok(points)
}
