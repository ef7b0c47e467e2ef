//! User interaction sequences and the train/test split.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Item ids in interaction order.
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub domain: String,
    pub sequences: Vec<UserSequence>,
}

impl InteractionDataset {
    pub fn new(domain: impl Into<String>, sequences: Vec<UserSequence>) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.items.len() < 2 {
                return Err(Error::Malformed {
                    row: i + 1,
                    message: format!("sequence `{}` has fewer than 2 items", s.user_id),
                });
            }
        }
        Ok(Self {
            domain: domain.into(),
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fails on the first item id (in file order) that `known` rejects.
    pub fn validate_items(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        for s in &self.sequences {
            if let Some(bad) = s.items.iter().find(|i| !known(i)) {
                return Err(Error::UnknownItem(bad.clone()));
            }
        }
        Ok(())
    }

    /// Distinct item ids in first-seen order.
    pub fn item_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.sequences
            .iter()
            .flat_map(|s| s.items.iter())
            .filter(|i| seen.insert(i.as_str()))
            .map(String::as_str)
            .collect()
    }

    pub fn load(path: &Path, domain: impl Into<String>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), domain).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// One `user_id item_1 item_2 …` line per user, items in time order.
    pub fn parse<R: BufRead>(reader: R, domain: impl Into<String>) -> Result<Self> {
        let mut sequences = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            let mut fields = line.split_whitespace();
            let Some(user_id) = fields.next() else { continue };
            let items: Vec<String> = fields.map(str::to_string).collect();
            if items.len() < 2 {
                return Err(Error::Malformed {
                    row: i + 1,
                    message: format!("user `{user_id}` has fewer than 2 items"),
                });
            }
            sequences.push(UserSequence {
                user_id: user_id.to_string(),
                items,
            });
        }
        Self::new(domain, sequences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            for s in &self.sequences {
                write!(w, "{}", s.user_id)?;
                for item in &s.items {
                    write!(w, " {item}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 42,
        }
    }
}

/// Sequence-level split after a seeded shuffle. The training side receives
/// `floor(train_fraction · n)` sequences, clamped to `[1, n − 1]` so neither
/// side is empty. Both sides keep the dataset's original order.
pub fn split_dataset(data: &InteractionDataset, spec: &SplitSpec) -> Result<(InteractionDataset, InteractionDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} not in (0, 1)",
            spec.train_fraction
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} sequences; a split needs at least 2")));
    }
    let n_train = ((spec.train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| InteractionDataset {
        domain: data.domain.clone(),
        sequences: idx.iter().map(|&i| data.sequences[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}
