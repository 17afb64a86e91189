//! First-order Markov interaction generator for desk-scale experiments.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSpec {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probabilities of each item's ranked successors; the remainder is uniform noise.
    pub successor_probs: Vec<f64>,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 100,
            min_len: 10,
            max_len: 30,
            successor_probs: vec![0.6, 0.25, 0.1],
            seed: 0,
        }
    }
}

impl MarkovSpec {
    fn validate(&self) -> Result<()> {
        let total: f64 = self.successor_probs.iter().sum();
        if self.users == 0
            || self.items < self.successor_probs.len().max(2)
            || self.min_len < 3
            || self.max_len < self.min_len
            || !(0.0..=1.0).contains(&total)
        {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }

    /// Draws the per-user sequences (1-based item ids).
    pub fn sequences(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut rng = stream(self.seed, Stream::Synthetic);
        let k = self.successor_probs.len();
        let successors: Vec<Vec<usize>> = (0..self.items)
            .map(|_| sample(&mut rng, self.items, k).into_vec())
            .collect();
        let mut out = Vec::with_capacity(self.users);
        for _ in 0..self.users {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let mut cur = rng.gen_range(0..self.items);
            let mut seq = vec![cur + 1];
            while seq.len() < len {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut next = None;
                for (j, &p) in self.successor_probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = Some(successors[cur][j]);
                        break;
                    }
                }
                cur = next.unwrap_or_else(|| rng.gen_range(0..self.items));
                seq.push(cur + 1);
            }
            out.push(seq);
        }
        Ok(out)
    }

    pub fn dataset(&self) -> Result<InteractionDataset> {
        InteractionDataset::from_sequences(self.items, self.sequences()?)
    }

    /// Writes `user_id \t item_id \t timestamp` rows.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "user_id\titem_id\ttimestamp")?;
        for (u, seq) in self.sequences()?.iter().enumerate() {
            for (t, item) in seq.iter().enumerate() {
                writeln!(buf, "u{u}\ti{item}\t{t}")?;
            }
        }
        crate::io::write_atomic(path, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let spec = MarkovSpec {
            users: 50,
            ..Default::default()
        };
        let a = spec.sequences().unwrap();
        assert_eq!(a, spec.sequences().unwrap());
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|s| (10..=30).contains(&s.len())));
        assert!(a.iter().flatten().all(|&i| (1..=100).contains(&i)));
    }
}
