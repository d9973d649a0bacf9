use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Optimizer, OptimizerConfig};
use crate::error::{ensure, Error, Result};
use crate::lora::{AdaptedModel, LoraConfig};
use crate::modelzoo::{Model, PreparedData, Selector};
use crate::{Graph, Mode};

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BATCH: usize = 32;
pub const BASELINE_LR: f64 = 1e-3;
pub const TRANSFORMER_LR: f64 = 5e-4;

/// What a fold trains on top of the shared backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Variant {
    /// Every tensor trainable.
    Full,
    /// Backbone frozen, head trained.
    HeadOnly,
    Lora(LoraConfig),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::HeadOnly => "head_only".into(),
            Variant::Lora(c) => format!("lora[{}] r={} p={}", crate::lora::targets_label(&c.targets), c.rank, c.dropout),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Defaults by family when absent.
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
}

fn d_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn d_batch() -> usize {
    DEFAULT_BATCH
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: DEFAULT_EPOCHS, batch_size: DEFAULT_BATCH, optimizer: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        if let Some(o) = &self.optimizer {
            o.validate()?;
        }
        Ok(())
    }

    /// Adam at 1e-3 for conv baselines, 5e-4 for attention models.
    pub fn optimizer_for(&self, model: &Model) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| {
            let attn = model.layers().iter().any(|l| l.kind == crate::modelzoo::LayerKind::AttentionQkv);
            OptimizerConfig::adam(if attn { TRANSFORMER_LR } else { BASELINE_LR })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fold: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub epoch_loss: Vec<f64>,
    /// Correct over total validation trials.
    pub accuracy: f64,
    pub correct: usize,
    pub n_val: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub wall_time_s: f64,
    /// Why the run stopped early, if it did.
    pub failed: Option<String>,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.failed.is_none()
    }
}

/// Applies the variant to a fresh copy of the backbone: new head from
/// `seed`, then freezing or adapters.
pub fn prepare(base: &Model, variant: &Variant, seed: u64) -> Result<Model> {
    let mut m = base.clone();
    m.reinit_head(crate::seed::derive(seed, &["head"]));
    match variant {
        Variant::Full => {
            for id in m.params().ids().collect::<Vec<_>>() {
                m.params_mut().set_requires_grad(id, true);
            }
            Ok(m)
        }
        Variant::HeadOnly => {
            m.freeze(&Selector::Backbone)?;
            Ok(m)
        }
        Variant::Lora(c) => Ok(AdaptedModel::inject(m, c, crate::seed::derive(seed, &["lora"]))?.model().clone()),
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy `(correct, total)` over `idx`.
pub fn evaluate(model: &Model, data: &PreparedData, idx: &[usize], batch_size: usize) -> Result<(usize, usize)> {
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let y = model.predict(&data.batch(chunk))?;
        let c = model.n_cls();
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(&y.data()[r * c..(r + 1) * c]) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok((correct, idx.len()))
}

/// Mini-batch cross-entropy training followed by validation. A non-finite
/// loss ends the run with `failed` set instead of an error.
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    model: &mut Model,
    data: &PreparedData,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    fold: usize,
    fingerprint: String,
) -> Result<RunResult> {
    cfg.validate()?;
    ensure!(!train_idx.is_empty(), InvalidArgument, "training set is empty");
    ensure!(!val_idx.is_empty(), InvalidArgument, "validation set is empty");
    ensure!(data.n_classes <= model.n_cls(), Shape, "data has {} classes but model predicts {}", data.n_classes, model.n_cls());
    let start = Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer_for(model))?;
    let mut order = train_idx.to_vec();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut failed = None;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut crate::seed::rng(crate::seed::derive_idx(seed, "epoch", epoch as u64)));
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let gseed = crate::seed::derive(seed, &["batch", &epoch.to_string(), &bi.to_string()]);
            let mut g = Graph::new(Mode::Train, gseed);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let step = (|| -> Result<f64> {
                let y = model.forward(&mut g, &data.batch(chunk))?;
                let loss = g.cross_entropy(y, &labels)?;
                let l = g.value(loss).item();
                let grads = g.backward(loss)?;
                opt.step(model.params_mut(), &grads)?;
                Ok(l)
            })();
            match step {
                Ok(l) if l.is_finite() => {
                    sum += l * chunk.len() as f64;
                    count += chunk.len();
                    model.apply_buffer_updates(g.take_buffer_updates());
                }
                Ok(l) => {
                    failed = Some(format!("loss {l} at epoch {epoch}"));
                    break 'outer;
                }
                Err(Error::NonFinite(msg)) => {
                    failed = Some(format!("non-finite value at epoch {epoch}: {msg}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        epoch_loss.push(sum / count as f64);
    }
    let report = model.count_params();
    let (correct, n_val) = if failed.is_none() { evaluate(model, data, val_idx, cfg.batch_size)? } else { (0, val_idx.len()) };
    Ok(RunResult {
        fold,
        seed,
        fingerprint,
        epoch_loss,
        accuracy: correct as f64 / n_val as f64,
        correct,
        n_val,
        trainable_params: report.trainable,
        total_params: report.total,
        wall_time_s: start.elapsed().as_secs_f64(),
        failed,
    })
}
