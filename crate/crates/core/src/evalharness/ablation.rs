use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, CvContext, FoldResults};
use super::stats::Summary;
use super::train::Variant;
use crate::error::{ensure, Result};
use crate::lora::{resolve_conv_rank, targets_label, ConvRankPolicy, LoraConfig, TargetKind, SWEEP_RANKS};

fn d_ranks() -> Vec<usize> {
    SWEEP_RANKS.to_vec()
}
fn d_dropout() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default = "d_ranks")]
    pub ranks: Vec<usize>,
    /// Adapter dropout compared against none.
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    /// Layer-type combinations; defaults to every singleton and pair.
    #[serde(default)]
    pub combos: Option<Vec<BTreeSet<TargetKind>>>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec { ranks: d_ranks(), dropout: d_dropout(), combos: None }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ranks.is_empty() && self.ranks.iter().all(|&r| r >= 1), Config, "ranks must be a nonempty list of positive integers");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout {} outside [0, 1)", self.dropout);
        if let Some(c) = &self.combos {
            ensure!(!c.is_empty() && c.iter().all(|s| !s.is_empty()), Config, "combos must be nonempty sets");
        }
        Ok(())
    }
}

/// The three singletons and three pairs of layer types.
pub fn default_combos() -> Vec<BTreeSet<TargetKind>> {
    let k = TargetKind::ALL;
    let mut out: Vec<BTreeSet<TargetKind>> = k.iter().map(|t| [*t].into()).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            out.push([k[i], k[j]].into());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub targets: String,
    pub rank: usize,
    pub conv_rank: Option<usize>,
    pub dropout: f64,
    pub summary: Option<Summary>,
    pub trainable_params: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRow {
    pub rank: usize,
    pub acc_without: f64,
    pub acc_with: f64,
    /// `acc(p) − acc(0)`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sweep: Vec<GridRow>,
    pub r_prime: usize,
    pub layers: Vec<GridRow>,
    pub dropout: Vec<DropoutRow>,
    pub runs: Vec<FoldResults>,
}

fn row(ctx: &CvContext, res: &FoldResults, cfg: &LoraConfig) -> Result<GridRow> {
    let conv_rank = if cfg.targets.contains(&TargetKind::Conv) { Some(resolve_conv_rank(ctx.base, cfg.conv_rank)?) } else { None };
    Ok(GridRow {
        targets: targets_label(&cfg.targets),
        rank: cfg.rank,
        conv_rank,
        dropout: cfg.dropout,
        summary: res.summary(),
        trainable_params: res.trainable_params(),
        n_failed: res.n_failed(),
    })
}

fn mean_of(r: &GridRow) -> f64 {
    r.summary.map_or(f64::NEG_INFINITY, |s| s.mean)
}

/// Rank sweep over every adaptable kind, layer combinations at the best
/// rank, then the dropout comparison per rank. Grid points already in the
/// run cache are reused.
pub fn run_ablation(ctx: &CvContext, spec: &AblationSpec) -> Result<AblationReport> {
    spec.validate()?;
    let present: BTreeSet<TargetKind> =
        TargetKind::ALL.into_iter().filter(|t| ctx.base.layers().iter().any(|l| l.kind == t.layer_kind())).collect();
    ensure!(!present.is_empty(), InvalidArgument, "model {} has no adaptable layers", ctx.base.config().name);
    let mut runs = Vec::new();
    let mut run = |cfg: &LoraConfig| -> Result<GridRow> {
        let res = cross_validate(ctx, &Variant::Lora(cfg.clone()))?;
        let r = row(ctx, &res, cfg)?;
        runs.push(res);
        Ok(r)
    };
    let lora = |targets: &BTreeSet<TargetKind>, rank: usize, dropout: f64| LoraConfig {
        conv_rank: ConvRankPolicy::AutoMaxPow2,
        ..LoraConfig::new(targets.iter().copied(), rank).with_dropout(dropout)
    };

    let mut sweep = Vec::new();
    for &r in &spec.ranks {
        sweep.push(run(&lora(&present, r, 0.0))?);
    }
    // Best mean accuracy; ties resolve to the smaller rank.
    let mut best = &sweep[0];
    for s in &sweep[1..] {
        if mean_of(s) > mean_of(best) || (mean_of(s) == mean_of(best) && s.rank < best.rank) {
            best = s;
        }
    }
    let r_prime = best.rank;

    let combos = spec.combos.clone().unwrap_or_else(default_combos);
    let mut layers = Vec::new();
    for c in combos.iter().filter(|c| c.is_subset(&present)) {
        layers.push(run(&lora(c, r_prime, 0.0))?);
    }

    let mut dropout = Vec::new();
    for (i, &r) in spec.ranks.iter().enumerate() {
        let with = run(&lora(&present, r, spec.dropout))?;
        let (a0, a1) = (mean_of(&sweep[i]), mean_of(&with));
        dropout.push(DropoutRow { rank: r, acc_without: a0, acc_with: a1, delta: a1 - a0 });
    }
    Ok(AblationReport { sweep, r_prime, layers, dropout, runs })
}
