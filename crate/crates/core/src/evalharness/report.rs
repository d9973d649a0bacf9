//! CSV tables. Floats use Rust's shortest round-trip formatting, so values
//! parse back bit-exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::{AblationReport, GridRow};
use super::cv::{fingerprint, FoldResults};
use super::folds::FoldPlan;
use crate::modelzoo::ModelConfig;
use super::stats::{paired_ttest, Degenerate};
use crate::error::{Error, Result};

pub const TABLE_MAIN: &str = "accuracy.csv";
pub const TABLE_TTEST: &str = "ttest.csv";
pub const TABLE_RANKS: &str = "rank_sweep.csv";
pub const TABLE_LAYERS: &str = "layer_combos.csv";
pub const TABLE_DROPOUT: &str = "dropout.csv";
pub const PLOT_PARAMS: &str = "acc_vs_params.csv";
pub const PLOT_RANK: &str = "acc_vs_rank.csv";

/// Writes through a sibling temp file and renames over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    tmp.as_mut_os_string().push(".tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub const RUN_SET_FILE: &str = "folds.json";

/// Everything `train` writes about one cross-validated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSetRecord {
    pub name: String,
    pub model: ModelConfig,
    pub total_params: usize,
    pub plan: FoldPlan,
    pub results: FoldResults,
}

impl RunSetRecord {
    /// Identity of the configuration, independent of outcomes.
    pub fn config_fingerprint(&self) -> String {
        fingerprint(&serde_json::json!({ "model": self.model, "variant": self.results.variant, "plan": self.plan }))
    }

    pub fn as_run_set(&self) -> RunSet<'_> {
        RunSet { name: self.name.clone(), model: self.model.name.clone(), total_params: self.total_params, results: &self.results }
    }
}

/// One named run set for the accuracy and t-test tables.
pub struct RunSet<'a> {
    pub name: String,
    pub model: String,
    pub total_params: usize,
    pub results: &'a FoldResults,
}

pub fn main_table(path: &Path, sets: &[RunSet]) -> Result<()> {
    let rows: Vec<Vec<String>> = sets
        .iter()
        .map(|s| {
            let sm = s.results.summary();
            vec![
                s.name.clone(),
                s.model.clone(),
                s.results.variant.label(),
                opt(sm.map(|x| x.mean)),
                opt(sm.map(|x| x.std)),
                s.results.runs.len().to_string(),
                s.results.n_failed().to_string(),
                s.results.trainable_params().to_string(),
                s.total_params.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["run", "model", "variant", "mean_acc", "std_acc", "folds", "failed", "trainable_params", "total_params"], &rows)
}

/// Pairwise fold-matched t-tests. Sets must share fold plans and have no
/// failed folds.
pub fn ttest_table(path: &Path, sets: &[RunSet]) -> Result<()> {
    let mut rows = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            let (fa, fb) = (&a.results.runs, &b.results.runs);
            if fa.len() != fb.len() || fa.iter().zip(fb).any(|(x, y)| x.fold != y.fold) {
                return Err(Error::InvalidArgument(format!("{} and {} do not share a fold plan", a.name, b.name)));
            }
            if a.results.n_failed() + b.results.n_failed() > 0 {
                return Err(Error::InvalidArgument(format!("{} or {} has failed folds; pairing is undefined", a.name, b.name)));
            }
            let t = paired_ttest(&a.results.accuracies(), &b.results.accuracies())?;
            let flag = match t.degenerate {
                None => "",
                Some(Degenerate::Identical) => "identical",
                Some(Degenerate::ZeroVarianceNonzeroMean) => "zero_variance",
            };
            rows.push(vec![a.name.clone(), b.name.clone(), fa.len().to_string(), format!("{}", t.t), t.df.to_string(), format!("{}", t.p), flag.into()]);
        }
    }
    write_csv(path, &["run_a", "run_b", "n", "t", "df", "p", "flag"], &rows)
}

fn grid_rows(rows: &[GridRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.targets.clone(),
                r.rank.to_string(),
                r.conv_rank.map_or_else(String::new, |c| c.to_string()),
                format!("{}", r.dropout),
                opt(r.summary.map(|s| s.mean)),
                opt(r.summary.map(|s| s.std)),
                r.trainable_params.to_string(),
                r.n_failed.to_string(),
            ]
        })
        .collect()
}

const GRID_HEADER: [&str; 8] = ["targets", "rank", "conv_rank", "dropout", "mean_acc", "std_acc", "trainable_params", "failed"];

/// The five ablation CSVs under `dir`.
pub fn ablation_tables(dir: &Path, rep: &AblationReport) -> Result<()> {
    write_csv(&dir.join(TABLE_RANKS), &GRID_HEADER, &grid_rows(&rep.sweep))?;
    write_csv(&dir.join(TABLE_LAYERS), &GRID_HEADER, &grid_rows(&rep.layers))?;

    let mut rows: Vec<Vec<String>> =
        rep.dropout.iter().map(|d| vec![d.rank.to_string(), format!("{}", d.acc_without), format!("{}", d.acc_with), format!("{}", d.delta)]).collect();
    if !rep.dropout.is_empty() {
        let n = rep.dropout.len() as f64;
        let m = |f: fn(&super::ablation::DropoutRow) -> f64| format!("{}", rep.dropout.iter().map(f).sum::<f64>() / n);
        rows.push(vec!["mean".into(), m(|d| d.acc_without), m(|d| d.acc_with), m(|d| d.delta)]);
    }
    write_csv(&dir.join(TABLE_DROPOUT), &["rank", "acc_no_dropout", "acc_dropout", "delta"], &rows)?;

    let params: Vec<Vec<String>> =
        rep.sweep.iter().map(|r| vec![r.trainable_params.to_string(), opt(r.summary.map(|s| s.mean)), r.rank.to_string()]).collect();
    write_csv(&dir.join(PLOT_PARAMS), &["trainable_params", "mean_acc", "rank"], &params)?;
    let ranks: Vec<Vec<String>> =
        rep.sweep.iter().map(|r| vec![r.rank.to_string(), opt(r.summary.map(|s| s.mean)), opt(r.summary.map(|s| s.std))]).collect();
    write_csv(&dir.join(PLOT_RANK), &["rank", "mean_acc", "std_acc"], &ranks)
}

/// Minimal reader for the tables written here (no embedded newlines).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().map(split_line);
    let header = lines.next().ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?;
    Ok((header, lines.collect()))
}

fn split_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}
