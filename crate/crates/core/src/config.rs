//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::InputFormat;
use crate::error::{Error, Result};
use crate::search::TrainConfig;
use crate::supernet::SupernetConfig;
use crate::synthetic::MarkovSpec;
use crate::tensor::Scalar;

/// Every accepted key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "interaction file (user_id, item_id, timestamp); empty means synthetic data"),
    ("format", "auto, tsv or csv"),
    ("output", "run directory"),
    ("seed", "root seed of every random stream"),
    ("hidden", "supernet hidden width d"),
    ("inner", "supernet inner width D"),
    ("seq_len", "input window N"),
    ("layers", "supernet depth L"),
    ("heads", "attention heads n"),
    ("gammas", "hidden pruning intensities, comma separated"),
    ("gamma_primes", "inner pruning intensities, comma separated"),
    ("gate_layers", "layers per data-aware gate, 0 to 4"),
    ("dropout", "dropout rate"),
    ("gate_scale", "upper bound of gate outputs"),
    ("lambda", "resource penalty weight"),
    ("learning_rate", "Adam step size for model weights"),
    ("arch_learning_rate", "Adam step size for controller logits"),
    ("search_batch", "batch size during search"),
    ("retrain_batch", "batch size during retraining"),
    ("max_epochs", "search epoch cap"),
    ("retrain_epochs", "retraining epoch cap"),
    ("patience", "epochs without validation improvement before stopping"),
    ("refresh", "iterations between dynamic-depth refreshes"),
    ("sliding", "train the search on every next-item step"),
    ("retrain_sliding", "retrain on every next-item step"),
    ("top_k", "cutoff of the ranking metrics"),
    ("exclude_history", "drop already-seen items from rankings"),
    ("synthetic_users", "users of the generated dataset"),
    ("synthetic_items", "items of the generated dataset"),
    ("synthetic_min_len", "shortest generated sequence"),
    ("synthetic_max_len", "longest generated sequence"),
    ("synthetic_seed", "seed of the generated dataset"),
    ("sweep_lambdas", "lambda values of sweep-lambda"),
    ("sweep_seeds", "seeds of every sweep point"),
    ("sweep_gate_layers", "gate depths of sweep-gate-depth"),
    ("parallel", "run sweep points on separate threads"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: InputFormat,
    pub output: PathBuf,
    /// `num_items` is filled in from the dataset.
    pub supernet: SupernetConfig,
    pub train: TrainConfig,
    pub synthetic: MarkovSpec,
    pub sweep_lambdas: Vec<Scalar>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_gate_layers: Vec<usize>,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            format: InputFormat::Auto,
            output: PathBuf::from("runs/default"),
            supernet: SupernetConfig::default(),
            train: TrainConfig::default(),
            synthetic: MarkovSpec::default(),
            sweep_lambdas: vec![0.01, 0.1, 1.0],
            sweep_seeds: vec![0, 1, 2],
            sweep_gate_layers: vec![0, 1, 2, 3, 4],
            parallel: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_format(value: &str) -> Result<InputFormat> {
    match value {
        "auto" => Ok(InputFormat::Auto),
        "tsv" => Ok(InputFormat::Tsv),
        "csv" => Ok(InputFormat::Csv),
        other => Err(Error::Config(format!("format: expected auto, tsv or csv, got {other:?}"))),
    }
}

fn format_name(f: InputFormat) -> &'static str {
    match f {
        InputFormat::Auto => "auto",
        InputFormat::Tsv => "tsv",
        InputFormat::Csv => "csv",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (s, t, m) = (&mut self.supernet, &mut self.train, &mut self.synthetic);
        match key {
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "format" => self.format = parse_format(v)?,
            "output" => self.output = PathBuf::from(v),
            "seed" => t.seed = parse(key, v)?,
            "hidden" => s.hidden = parse(key, v)?,
            "inner" => s.inner = parse(key, v)?,
            "seq_len" => s.seq_len = parse(key, v)?,
            "layers" => s.layers = parse(key, v)?,
            "heads" => s.heads = parse(key, v)?,
            "gammas" => s.gammas = parse_list(key, v)?,
            "gamma_primes" => s.gamma_primes = parse_list(key, v)?,
            "gate_layers" => s.gate_layers = parse(key, v)?,
            "dropout" => s.dropout = parse(key, v)?,
            "gate_scale" => s.gate_scale = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "arch_learning_rate" => t.arch_learning_rate = parse(key, v)?,
            "search_batch" => t.search_batch = parse(key, v)?,
            "retrain_batch" => t.retrain_batch = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "retrain_epochs" => t.retrain_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "refresh" => t.refresh = parse(key, v)?,
            "sliding" => t.sliding = parse(key, v)?,
            "retrain_sliding" => t.retrain_sliding = parse(key, v)?,
            "top_k" => t.top_k = parse(key, v)?,
            "exclude_history" => t.exclude_history = parse(key, v)?,
            "synthetic_users" => m.users = parse(key, v)?,
            "synthetic_items" => m.items = parse(key, v)?,
            "synthetic_min_len" => m.min_len = parse(key, v)?,
            "synthetic_max_len" => m.max_len = parse(key, v)?,
            "synthetic_seed" => m.seed = parse(key, v)?,
            "sweep_lambdas" => self.sweep_lambdas = parse_list(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse_list(key, v)?,
            "sweep_gate_layers" => self.sweep_gate_layers = parse_list(key, v)?,
            "parallel" => self.parallel = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (s, t, m) = (&self.supernet, &self.train, &self.synthetic);
        Some(match key {
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "format" => format_name(self.format).to_string(),
            "output" => self.output.display().to_string(),
            "seed" => t.seed.to_string(),
            "hidden" => s.hidden.to_string(),
            "inner" => s.inner.to_string(),
            "seq_len" => s.seq_len.to_string(),
            "layers" => s.layers.to_string(),
            "heads" => s.heads.to_string(),
            "gammas" => join(&s.gammas),
            "gamma_primes" => join(&s.gamma_primes),
            "gate_layers" => s.gate_layers.to_string(),
            "dropout" => s.dropout.to_string(),
            "gate_scale" => s.gate_scale.to_string(),
            "lambda" => t.lambda.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "arch_learning_rate" => t.arch_learning_rate.to_string(),
            "search_batch" => t.search_batch.to_string(),
            "retrain_batch" => t.retrain_batch.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "retrain_epochs" => t.retrain_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "refresh" => t.refresh.to_string(),
            "sliding" => t.sliding.to_string(),
            "retrain_sliding" => t.retrain_sliding.to_string(),
            "top_k" => t.top_k.to_string(),
            "exclude_history" => t.exclude_history.to_string(),
            "synthetic_users" => m.users.to_string(),
            "synthetic_items" => m.items.to_string(),
            "synthetic_min_len" => m.min_len.to_string(),
            "synthetic_max_len" => m.max_len.to_string(),
            "synthetic_seed" => m.seed.to_string(),
            "sweep_lambdas" => join(&self.sweep_lambdas),
            "sweep_seeds" => join(&self.sweep_seeds),
            "sweep_gate_layers" => join(&self.sweep_gate_layers),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values. Blank
    /// lines and `#` comments are ignored; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            self.set(key, value).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let probe = SupernetConfig {
            num_items: self.supernet.num_items.max(1),
            ..self.supernet.clone()
        };
        probe.validate()?;
        self.train.validate()?;
        if self.sweep_seeds.is_empty() {
            return Err(Error::Config("sweep_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Every key in schema order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("schema key")))
            .collect()
    }
}
