use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-validation assignment of subjects to folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    /// `(subject_id, fold)` in the caller's subject order.
    pub assignments: Vec<(String, usize)>,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct FoldRow {
    subject_id: String,
    fold: usize,
}

/// Shuffles the subjects with `seed` and deals them round-robin into `k` folds.
pub fn split_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::param("k", format!("need at least 2 folds, got {k}")));
    }
    if subject_ids.len() < k {
        return Err(Error::contract(format!(
            "{} subjects cannot fill {k} folds",
            subject_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..subject_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; subject_ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % k;
    }
    Ok(FoldSplit {
        assignments: subject_ids.iter().cloned().zip(fold_of).collect(),
        folds: k,
        seed,
    })
}

impl FoldSplit {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.iter().find(|(s, _)| s == subject_id).map(|&(_, f)| f)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &(_, f) in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn validation(&self, fold: usize) -> Vec<String> {
        self.select(|f| f == fold)
    }

    pub fn training(&self, fold: usize) -> Vec<String> {
        self.select(|f| f != fold)
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| keep(*f))
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Writes `subject_id,fold` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for (subject_id, fold) in &self.assignments {
            w.serialize(FoldRow {
                subject_id: subject_id.clone(),
                fold: *fold,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`FoldSplit::write_csv`]; the seed is not stored and is reported as 0.
    pub fn read_csv(path: &Path) -> Result<FoldSplit> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let assignments = r
            .deserialize::<FoldRow>()
            .map(|row| row.map(|r| (r.subject_id, r.fold)).map_err(csv_err))
            .collect::<Result<Vec<_>>>()?;
        let folds = assignments.iter().map(|&(_, f)| f + 1).max().unwrap_or(0);
        Ok(FoldSplit {
            assignments,
            folds,
            seed: 0,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("malformed fold table: {other:?}")),
    }
}
