use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::folds::{assert_disjoint, FoldPlan};
use super::stats::{aggregate, Summary};
use super::train::{prepare, train_run, RunResult, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::modelzoo::{Model, PreparedData};

/// Hex SHA-256 of a JSON value's compact serialization.
pub fn fingerprint(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json values serialize")))
}

/// Content hash of a prepared data set (labels, subjects and samples).
pub fn data_fingerprint(set: &crate::signalprep::TrialSet) -> String {
    let mut h = Sha256::new();
    h.update(set.fs.to_le_bytes());
    h.update((set.n_samples as u64).to_le_bytes());
    for e in &set.channels {
        h.update(e.label.as_bytes());
        h.update([0]);
    }
    for (l, s) in set.labels.iter().zip(&set.subjects) {
        h.update((*l as u64).to_le_bytes());
        h.update(s.as_bytes());
        h.update([0]);
    }
    for v in &set.data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Everything a fold run depends on besides its variant.
#[derive(Clone, Copy)]
pub struct CvContext<'a> {
    pub base: &'a Model,
    pub data: &'a PreparedData,
    pub data_id: &'a str,
    pub plan: &'a FoldPlan,
    pub train: &'a TrainConfig,
    pub seed: u64,
    pub cache: Option<&'a RunCache>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
}

impl FoldResults {
    /// Accuracies of runs that finished, in fold order.
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter(|r| r.ok()).map(|r| r.accuracy).collect()
    }

    pub fn n_failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }

    pub fn summary(&self) -> Option<Summary> {
        aggregate(&self.accuracies()).ok()
    }

    pub fn trainable_params(&self) -> usize {
        self.runs.first().map_or(0, |r| r.trainable_params)
    }
}

/// Completed runs keyed by fingerprint, one JSON file each.
#[derive(Clone, Debug)]
pub struct RunCache {
    dir: PathBuf,
}

impl RunCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunCache { dir: dir.to_path_buf() })
    }

    fn path(&self, fp: &str) -> PathBuf {
        self.dir.join(format!("{fp}.json"))
    }

    pub fn get(&self, fp: &str) -> Result<Option<RunResult>> {
        let p = self.path(fp);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: RunResult = crate::modelzoo::parse_json(&text, &p)?;
        // A record under the wrong name means the grid state is corrupt.
        if r.fingerprint != fp {
            return Err(Error::Config(format!("{}: holds run {}, not {}", p.display(), r.fingerprint, fp)));
        }
        Ok(Some(r))
    }

    pub fn put(&self, r: &RunResult) -> Result<()> {
        let text = serde_json::to_vec_pretty(r).expect("run serializes");
        super::report::atomic_write(&self.path(&r.fingerprint), &text)
    }

    pub fn len(&self) -> Result<usize> {
        let rd = std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        Ok(rd.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "json")).count())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

pub fn run_fingerprint(ctx: &CvContext, variant: &Variant, fold: usize) -> String {
    fingerprint(&serde_json::json!({
        "model": ctx.base.config(),
        "variant": variant,
        "train": ctx.train,
        "folds": { "k": ctx.plan.k, "seed": ctx.plan.seed },
        "fold": fold,
        "seed": ctx.seed,
        "data": ctx.data_id,
    }))
}

/// One run per fold, each with a fresh head (and adapters) seeded from the
/// fold; the backbone is shared.
pub fn cross_validate(ctx: &CvContext, variant: &Variant) -> Result<FoldResults> {
    let runs = (0..ctx.plan.k)
        .into_par_iter()
        .map(|fold| -> Result<RunResult> {
            let fp = run_fingerprint(ctx, variant, fold);
            if let Some(c) = ctx.cache {
                if let Some(r) = c.get(&fp)? {
                    return Ok(r);
                }
            }
            let (train, val) = ctx.plan.split(&ctx.data.subjects, fold)?;
            assert_disjoint(&ctx.data.subjects, &train, &val)?;
            let fseed = crate::seed::derive_idx(ctx.seed, "fold", fold as u64);
            let mut model = prepare(ctx.base, variant, fseed)?;
            let r = train_run(&mut model, ctx.data, &train, &val, ctx.train, fseed, fold, fp)?;
            if let Some(c) = ctx.cache {
                c.put(&r)?;
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldResults { variant: variant.clone(), runs })
}
