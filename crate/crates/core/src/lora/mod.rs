//! Low-rank adapters: `W' = W + (α/r)·A·B` with `A: d×r`, `B: r×k`.
//!
//! Adapter tensors are appended after the base parameters, so the base
//! store prefix (and every base `ParamId`) is untouched by injection and
//! merging. `B` starts at zero, which makes a freshly adapted model compute
//! exactly the base function.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::CheckpointEntry;
use crate::error::{ensure, Error, Result};
use crate::modelzoo::layers::{LayerKind, TRANSFORMER_INIT_STD};
use crate::modelzoo::{Model, ParamReport, Selector};
use crate::{ParamId, Tensor};

pub const DEFAULT_ALPHA: f64 = 8.0;
/// Ranks of the sweep grid.
pub const SWEEP_RANKS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[serde(alias = "attn")]
    Attention,
    #[serde(alias = "fc")]
    FullyConnected,
    Conv,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Attention, TargetKind::FullyConnected, TargetKind::Conv];

    /// The one layer kind each target adapts. Attention output projections
    /// and heads are never targets.
    pub fn layer_kind(self) -> LayerKind {
        match self {
            TargetKind::Attention => LayerKind::AttentionQkv,
            TargetKind::FullyConnected => LayerKind::FullyConnected,
            TargetKind::Conv => LayerKind::Conv,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Attention => "attention",
            TargetKind::FullyConnected => "fully_connected",
            TargetKind::Conv => "conv",
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "attn" => Ok(TargetKind::Attention),
            "fully_connected" | "fc" => Ok(TargetKind::FullyConnected),
            "conv" => Ok(TargetKind::Conv),
            _ => Err(Error::InvalidArgument(format!("unknown LoRA target {s:?}"))),
        }
    }
}

/// Compact label for a target set, e.g. `attention+conv`.
pub fn targets_label(t: &BTreeSet<TargetKind>) -> String {
    t.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRankPolicy {
    /// Largest power of two whose adapter is no bigger than the smallest
    /// conv kernel it wraps.
    AutoMaxPow2,
    Fixed(usize),
}

fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn d_policy() -> ConvRankPolicy {
    ConvRankPolicy::AutoMaxPow2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub targets: BTreeSet<TargetKind>,
    /// Rank for attention and fully connected adapters.
    pub rank: usize,
    #[serde(default = "d_policy")]
    pub conv_rank: ConvRankPolicy,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Must stay false; present so configs can state it.
    #[serde(default)]
    pub adapt_bias: bool,
}

impl LoraConfig {
    pub fn new(targets: impl IntoIterator<Item = TargetKind>, rank: usize) -> Self {
        LoraConfig {
            targets: targets.into_iter().collect(),
            rank,
            conv_rank: ConvRankPolicy::AutoMaxPow2,
            alpha: DEFAULT_ALPHA,
            dropout: 0.0,
            adapt_bias: false,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.targets.is_empty(), Config, "LoRA config needs at least one target kind");
        ensure!(self.rank >= 1, Config, "LoRA rank must be positive");
        if let ConvRankPolicy::Fixed(r) = self.conv_rank {
            ensure!(r >= 1, Config, "fixed conv rank must be positive");
        }
        ensure!(self.alpha.is_finite() && self.alpha > 0.0, Config, "alpha must be positive, got {}", self.alpha);
        ensure!((0.0..1.0).contains(&self.dropout), Config, "adapter dropout {} outside [0, 1)", self.dropout);
        ensure!(!self.adapt_bias, Config, "bias terms are never adapted; adapt_bias must be false");
        Ok(())
    }
}

/// One adapter's tensors; the owning layer holds it.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Adapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Largest `r = 2^j` with `r·(d+k) ≤ d·k`.
pub fn max_conv_rank(d: usize, k: usize) -> Result<usize> {
    ensure!(d >= 1 && k >= 1, InvalidArgument, "matrix dims must be positive, got {}x{}", d, k);
    if d + k > d * k {
        return Err(Error::WeightTooSmall { d, k });
    }
    let mut r = 1;
    while 2 * r * (d + k) <= d * k {
        r *= 2;
    }
    Ok(r)
}

/// A model with adapters injected and its backbone frozen.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    model: Model,
    config: LoraConfig,
    conv_rank: Option<usize>,
    adapted: Vec<usize>,
    base_len: usize,
}

impl AdaptedModel {
    /// Freezes every non-head tensor, then wraps each targeted weight.
    /// `A` draws from a Gaussian of std 0.02 seeded by `seed` and the layer
    /// name; `B` is zero.
    pub fn inject(mut model: Model, config: &LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(model.layers().iter().all(|l| l.adapter.is_none()), InvalidArgument, "model already carries adapters");
        for t in &config.targets {
            let kind = t.layer_kind();
            ensure!(model.layers().iter().any(|l| l.kind == kind), InvalidArgument, "model {} has no {} layers to adapt", model.config().name, t.as_str());
        }
        let conv_rank = if config.targets.contains(&TargetKind::Conv) {
            Some(resolve_conv_rank(&model, config.conv_rank)?)
        } else {
            None
        };

        model.freeze(&Selector::Backbone)?;
        let base_len = model.params.len();
        let mut adapted = Vec::new();
        for i in 0..model.layers.len() {
            let layer = &model.layers[i];
            let Some(t) = config.targets.iter().find(|t| t.layer_kind() == layer.kind) else {
                continue;
            };
            let (d, k) = layer.matrix_dims().expect("targeted kinds are matrices");
            let r = if *t == TargetKind::Conv { conv_rank.expect("resolved above") } else { config.rank };
            ensure!(r <= d.min(k), InvalidArgument, "rank {} exceeds min({}, {}) for layer {}", r, d, k, layer.name);
            let name = layer.name.clone();
            let mut rng = crate::seed::rng(crate::seed::derive(seed, &["lora", &name]));
            let values: Vec<f64> = (0..d * r).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).map(|z: f64| z * TRANSFORMER_INIT_STD).collect();
            let a = model.params.add(format!("{name}.lora.A"), Tensor::new(vec![d, r], values)?, true);
            let b = model.params.add(format!("{name}.lora.B"), Tensor::zeros(&[r, k]), true);
            model.layers[i].adapter = Some(Adapter { a, b, rank: r, alpha: config.alpha, dropout: config.dropout });
            adapted.push(i);
        }
        Ok(AdaptedModel { model, config: config.clone(), conv_rank, adapted, base_len })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    /// Conv rank actually used, if conv layers are targeted.
    pub fn conv_rank(&self) -> Option<usize> {
        self.conv_rank
    }

    /// `(layer name, d, k, r)` for every adapter.
    pub fn adapters(&self) -> Vec<(String, usize, usize, usize)> {
        self.adapted
            .iter()
            .map(|&i| {
                let l = &self.model.layers[i];
                let (d, k) = l.matrix_dims().expect("adapted layers are matrices");
                (l.name.clone(), d, k, l.adapter.as_ref().expect("adapted").rank)
            })
            .collect()
    }

    /// `Σ r·(d+k)` over adapters.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters().iter().map(|(_, d, k, r)| r * (d + k)).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.model.count_params().trainable
    }

    pub fn count_params(&self) -> ParamReport {
        self.model.count_params()
    }

    /// Folds each update into its base weight and drops the adapters.
    pub fn merge(self) -> Model {
        let AdaptedModel { mut model, adapted, base_len, .. } = self;
        for i in adapted {
            let ad = model.layers[i].adapter.take().expect("adapted");
            let w = model.layers[i].weight().expect("adapted layers have weights");
            let (d, k) = model.layers[i].matrix_dims().expect("matrix");
            let r = ad.rank;
            let s = ad.scale();
            let a = model.params.get(ad.a).value.data().to_vec();
            let b = model.params.get(ad.b).value.data().to_vec();
            // Linear weights are stored [d_in, d_out] and conv kernels
            // [out, in/g, kh, kw]; both are row-major d×k. A plain ordered
            // sum keeps the fold reproducible to the last bit.
            let wv = model.params.get_mut(w).value.data_mut();
            for i in 0..d {
                for j in 0..k {
                    let mut acc = 0.0;
                    for p in 0..r {
                        acc += a[i * r + p] * b[p * k + j];
                    }
                    wv[i * k + j] += s * acc;
                }
            }
        }
        model.params.truncate(base_len);
        model
    }

    /// Adapter tensors named `<layer>.lora.A` / `<layer>.lora.B`.
    pub fn adapter_entries(&self) -> Vec<CheckpointEntry> {
        self.adapted
            .iter()
            .flat_map(|&i| {
                let ad = self.model.layers[i].adapter.as_ref().expect("adapted");
                [ad.a, ad.b].map(|id| {
                    let p = self.model.params.get(id);
                    CheckpointEntry { name: p.name.clone(), tensor: p.value.clone() }
                })
            })
            .collect()
    }

    /// Restores adapter tensors saved by [`adapter_entries`](Self::adapter_entries).
    pub fn load_adapter_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let want = 2 * self.adapted.len();
        ensure!(entries.len() == want, Checkpoint, "expected {} adapter tensors, got {}", want, entries.len());
        for e in entries {
            let id = self.model.params.find(&e.name).filter(|id| id.index() >= self.base_len);
            let Some(id) = id else {
                return Err(Error::Checkpoint(format!("no adapter named {}", e.name)));
            };
            let p = self.model.params.get_mut(id);
            ensure!(p.value.shape() == e.tensor.shape(), Checkpoint, "{}: shape {:?} but adapter has {:?}", e.name, e.tensor.shape(), p.value.shape());
            p.value = e.tensor.clone();
        }
        Ok(())
    }
}

/// Model-wide conv rank. The automatic policy takes the minimum of
/// [`max_conv_rank`] over every conv layer so no adapter outgrows its kernel.
pub fn resolve_conv_rank(model: &Model, policy: ConvRankPolicy) -> Result<usize> {
    let dims: Vec<(usize, usize)> = model.layers().iter().filter(|l| l.kind == LayerKind::Conv).filter_map(|l| l.matrix_dims()).collect();
    ensure!(!dims.is_empty(), InvalidArgument, "model has no conv layers");
    match policy {
        ConvRankPolicy::Fixed(r) => Ok(r),
        ConvRankPolicy::AutoMaxPow2 => {
            let mut best = usize::MAX;
            for (d, k) in dims {
                best = best.min(max_conv_rank(d, k)?);
            }
            Ok(best)
        }
    }
}
