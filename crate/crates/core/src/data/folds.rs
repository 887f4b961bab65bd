use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject-wise partition into cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    /// subject id → fold index
    pub assignments: BTreeMap<u32, usize>,
}

/// Shuffles the subjects with `seed` and deals them round-robin into folds.
///
/// The result does not depend on the order of `subject_ids`.
pub fn make_folds(subject_ids: &[u32], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::invalid("n_folds", format!("{n_folds} < 2")));
    }
    let unique: BTreeSet<u32> = subject_ids.iter().copied().collect();
    if unique.len() != subject_ids.len() {
        let mut seen = BTreeSet::new();
        let dup = subject_ids.iter().find(|s| !seen.insert(**s)).expect("duplicate exists");
        return Err(Error::invalid("subject_ids", format!("subject {dup} listed twice")));
    }
    if unique.len() < n_folds {
        return Err(Error::invalid(
            "subject_ids",
            format!("{} subjects cannot fill {n_folds} folds", unique.len()),
        ));
    }
    let mut order: Vec<u32> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % n_folds))
        .collect();
    Ok(FoldPlan {
        n_folds,
        seed,
        assignments,
    })
}

impl FoldPlan {
    pub fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.n_folds {
            return Err(Error::invalid(
                "fold",
                format!("{fold} out of range for {} folds", self.n_folds),
            ));
        }
        Ok(())
    }

    /// Held-out subjects of `fold`, ascending.
    pub fn test_subjects(&self, fold: usize) -> Vec<u32> {
        self.assignments
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(&s, _)| s)
            .collect()
    }

    /// Subjects of every other fold, ascending.
    pub fn train_subjects(&self, fold: usize) -> Vec<u32> {
        self.assignments
            .iter()
            .filter(|&(_, &f)| f != fold)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}
