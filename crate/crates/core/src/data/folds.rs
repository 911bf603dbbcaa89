use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patient-level assignment to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub num_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignment.get(patient).copied()
    }

    /// Patients in `fold`, sorted.
    pub fn patients_in(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Patients outside `fold`, sorted.
    pub fn patients_outside(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles `patient_ids` with `seed` and deals them round-robin into `k` folds.
pub fn make_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut seen = BTreeSet::new();
    for p in patient_ids {
        if !seen.insert(p.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate patient id `{p}`"
            )));
        }
    }
    if patient_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {k} folds",
            patient_ids.len()
        )));
    }
    let mut order: Vec<&String> = patient_ids.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i % k))
        .collect();
    Ok(FoldPlan {
        num_folds: k,
        assignment,
    })
}
