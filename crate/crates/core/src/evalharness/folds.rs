use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Subject-level fold assignment: every subject lands in exactly one
/// validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

/// Seeded shuffle of the distinct subjects, dealt round-robin.
pub fn split_subject_kfold(subjects: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    ensure!(k >= 2, InvalidArgument, "need at least 2 folds, got {}", k);
    let mut distinct: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    ensure!(distinct.len() >= k, InvalidArgument, "{} subjects cannot fill {} folds", distinct.len(), k);
    distinct.shuffle(&mut crate::seed::rng(crate::seed::derive(seed, &["folds"])));
    let assignments = distinct.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Ok(FoldPlan { k, seed, assignments })
}

impl FoldPlan {
    pub fn validation_subjects(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    /// Trial indices `(train, val)` for `fold`, given each trial's subject.
    pub fn split(&self, trial_subjects: &[String], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        ensure!(fold < self.k, InvalidArgument, "fold {} out of range for k = {}", fold, self.k);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in trial_subjects.iter().enumerate() {
            let Some(&f) = self.assignments.get(s) else {
                return Err(crate::Error::InvalidArgument(format!("subject {s} missing from fold plan")));
            };
            if f == fold {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, val))
    }
}

/// Errors if any subject appears on both sides of a split.
pub fn assert_disjoint(trial_subjects: &[String], train: &[usize], val: &[usize]) -> Result<()> {
    let t: BTreeSet<&String> = train.iter().map(|&i| &trial_subjects[i]).collect();
    let leak: Vec<&String> = val.iter().map(|&i| &trial_subjects[i]).collect::<BTreeSet<_>>().into_iter().filter(|s| t.contains(s)).collect();
    ensure!(leak.is_empty(), InvalidArgument, "subjects {:?} appear in both train and validation", leak);
    Ok(())
}
