//! Interaction ingestion, leave-one-out splitting and padded batching.
//!
//! Item ids are remapped densely to `1..=num_items`; id 0 is the padding id.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;

/// Shortest sequence that survives ingestion: one training item plus the
/// validation and test targets.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    /// Tab if the first data line contains a tab, comma otherwise.
    Auto,
    Tsv,
    Csv,
}

/// Original ids in dense order: `users[u]` is user `u`, `items[k]` is item `k + 1`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub num_items: usize,
    /// Chronological item sequence per retained user.
    pub sequences: Vec<Vec<usize>>,
    pub id_map: IdMap,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Builds a dataset from already-dense sequences (item ids in `1..=num_items`).
    pub fn from_sequences(num_items: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &sequences {
            if s.len() < MIN_SEQUENCE_LEN {
                return Err(Error::Invariant(format!("sequence of length {} < {MIN_SEQUENCE_LEN}", s.len())));
            }
            if let Some(&bad) = s.iter().find(|&&i| i == PAD || i > num_items) {
                return Err(Error::IdOutOfRange { id: bad, max: num_items });
            }
        }
        let id_map = IdMap {
            users: (0..sequences.len()).map(|u| u.to_string()).collect(),
            items: (1..=num_items).map(|i| i.to_string()).collect(),
        };
        Ok(Self {
            num_items,
            sequences,
            id_map,
        })
    }
}

pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionDataset> {
    let file = std::fs::File::open(path)?;
    parse_interactions(std::io::BufReader::new(file), format)
}

/// Parses `user, item, timestamp` rows. Blank lines and `#` comments are
/// skipped, as is a leading header whose first field is `user_id`.
pub fn parse_interactions<R: BufRead>(reader: R, format: InputFormat) -> Result<InteractionDataset> {
    let mut delim: Option<char> = match format {
        InputFormat::Tsv => Some('\t'),
        InputFormat::Csv => Some(','),
        InputFormat::Auto => None,
    };
    // (user key, item key, timestamp) in file order
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    let mut seen_data = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let d = *delim.get_or_insert(if trimmed.contains('\t') { '\t' } else { ',' });
        let fields: Vec<&str> = trimmed.split(d).map(str::trim).collect();
        if !seen_data && fields[0].eq_ignore_ascii_case("user_id") {
            seen_data = true;
            continue;
        }
        seen_data = true;
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 columns (user_id, item_id, timestamp), found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty user or item id".into(),
            });
        }
        let ts: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("timestamp {:?} is not an integer", fields[2]),
        })?;
        rows.push((fields[0].to_string(), fields[1].to_string(), ts));
    }

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut users: Vec<&str> = Vec::new();
    let mut per_user: Vec<Vec<usize>> = Vec::new();
    for (i, (u, _, _)) in rows.iter().enumerate() {
        let idx = *user_index.entry(u.as_str()).or_insert_with(|| {
            users.push(u.as_str());
            per_user.push(Vec::new());
            users.len() - 1
        });
        per_user[idx].push(i);
    }
    // Stable sort keeps file order on timestamp ties.
    for list in &mut per_user {
        list.sort_by_key(|&i| rows[i].2);
    }
    let retained: Vec<usize> = (0..users.len())
        .filter(|&u| per_user[u].len() >= MIN_SEQUENCE_LEN)
        .collect();
    if retained.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let keep: Vec<bool> = {
        let mut k = vec![false; users.len()];
        retained.iter().for_each(|&u| k[u] = true);
        k
    };
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut items: Vec<String> = Vec::new();
    for (u, item, _) in &rows {
        if keep[user_index[u.as_str()]] && !item_index.contains_key(item.as_str()) {
            items.push(item.clone());
            item_index.insert(item.as_str(), items.len());
        }
    }
    let sequences = retained
        .iter()
        .map(|&u| per_user[u].iter().map(|&i| item_index[rows[i].1.as_str()]).collect())
        .collect();
    Ok(InteractionDataset {
        num_items: items.len(),
        sequences,
        id_map: IdMap {
            users: retained.iter().map(|&u| users[u].to_string()).collect(),
            items,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

/// Leave-one-out split: penultimate item for validation, last for test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_items: usize,
    pub users: Vec<UserSplit>,
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> Result<SplitSpec> {
    let users = ds
        .sequences
        .iter()
        .enumerate()
        .map(|(u, s)| {
            let n = s.len();
            if n < MIN_SEQUENCE_LEN {
                return Err(Error::Invariant(format!("user {u} has {n} interactions, need {MIN_SEQUENCE_LEN}")));
            }
            Ok(UserSplit {
                train: s[..n - 2].to_vec(),
                valid_target: s[n - 2],
                test_target: s[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitSpec {
        num_items: ds.num_items,
        users,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Valid,
    Test,
}

/// One supervised example before padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    /// Chronological input items, already truncated to the window.
    pub input: Vec<usize>,
    pub target: usize,
}

/// Fixed-length left-padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub seq_len: usize,
    /// `len() x seq_len` item ids, row-major, left-padded with [`PAD`].
    pub items: Vec<usize>,
    pub targets: Vec<usize>,
    /// Number of real (non-pad) cells per row.
    pub lengths: Vec<usize>,
    pub users: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.items[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn from_examples(examples: &[Example], seq_len: usize) -> Self {
        let mut items = Vec::with_capacity(examples.len() * seq_len);
        for ex in examples {
            let take = ex.input.len().min(seq_len);
            items.extend(std::iter::repeat(PAD).take(seq_len - take));
            items.extend_from_slice(&ex.input[ex.input.len() - take..]);
        }
        Self {
            seq_len,
            items,
            targets: examples.iter().map(|e| e.target).collect(),
            lengths: examples.iter().map(|e| e.input.len().min(seq_len)).collect(),
            users: examples.iter().map(|e| e.user).collect(),
        }
    }
}

/// Supervised examples for one purpose. Training rows with an empty input
/// window are skipped. `sliding` emits every next-item step of the training
/// prefix instead of only its final one.
pub fn examples(split: &SplitSpec, seq_len: usize, purpose: Purpose, sliding: bool) -> Vec<Example> {
    let window = |s: &[usize]| s[s.len().saturating_sub(seq_len)..].to_vec();
    let mut out = Vec::new();
    for (user, us) in split.users.iter().enumerate() {
        match purpose {
            Purpose::Train => {
                let p = &us.train;
                let first = if sliding { 1 } else { p.len().saturating_sub(1).max(1) };
                for t in first..p.len() {
                    out.push(Example {
                        user,
                        input: window(&p[..t]),
                        target: p[t],
                    });
                }
            }
            Purpose::Valid => out.push(Example {
                user,
                input: window(&us.train),
                target: us.valid_target,
            }),
            Purpose::Test => {
                let mut full = us.train.clone();
                full.push(us.valid_target);
                out.push(Example {
                    user,
                    input: window(&full),
                    target: us.test_target,
                });
            }
        }
    }
    out
}

/// Batches for one purpose. Training order is a permutation drawn from `rng`;
/// validation and test keep user order.
pub fn make_batches<R: Rng>(
    split: &SplitSpec,
    seq_len: usize,
    batch_size: usize,
    purpose: Purpose,
    sliding: bool,
    rng: &mut R,
) -> Result<Vec<SequenceBatch>> {
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Config("sequence length and batch size must be >= 1".into()));
    }
    let mut ex = examples(split, seq_len, purpose, sliding);
    if purpose == Purpose::Train {
        ex.shuffle(rng);
    }
    Ok(ex
        .chunks(batch_size)
        .map(|c| SequenceBatch::from_examples(c, seq_len))
        .collect())
}
