use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BnStats, Conv2dSpec};
use crate::error::Result;
use crate::lora::Adapter;
use crate::{Graph, ParamId, ParamStore, Tensor, Var};

/// Role of a layer, used for freezing, LoRA targeting and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    AttentionQkv,
    AttentionOut,
    FullyConnected,
    Norm,
    Embedding,
    Head,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::AttentionQkv => "attention_qkv",
            LayerKind::AttentionOut => "attention_out",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Norm => "norm",
            LayerKind::Embedding => "embedding",
            LayerKind::Head => "head",
        }
    }

    /// Kinds a low-rank adapter may target.
    pub fn is_adaptable(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::AttentionQkv | LayerKind::FullyConnected)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    /// `y = x·W + b` with `W` stored `[d_in, d_out]`.
    Linear { w: ParamId, b: Option<ParamId>, d_in: usize, d_out: usize },
    /// Kernel `[out, in/groups, kh, kw]`.
    Conv { w: ParamId, b: Option<ParamId>, in_ch: usize, out_ch: usize, kernel: (usize, usize), spec: Conv2dSpec },
    LayerNorm { gamma: ParamId, beta: ParamId, dim: usize },
    GroupNorm { gamma: ParamId, beta: ParamId, channels: usize, groups: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, channels: usize, buffer: usize },
    Embedding { table: ParamId, rows: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub op: LayerOp,
    pub adapter: Option<Adapter>,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl Layer {
    /// Base tensors (weight first), excluding any adapter.
    pub fn base_params(&self) -> Vec<ParamId> {
        match &self.op {
            LayerOp::Linear { w, b, .. } | LayerOp::Conv { w, b, .. } => std::iter::once(*w).chain(*b).collect(),
            LayerOp::LayerNorm { gamma, beta, .. } | LayerOp::GroupNorm { gamma, beta, .. } | LayerOp::BatchNorm { gamma, beta, .. } => {
                vec![*gamma, *beta]
            }
            LayerOp::Embedding { table, .. } => vec![*table],
        }
    }

    pub fn bias(&self) -> Option<ParamId> {
        match &self.op {
            LayerOp::Linear { b, .. } | LayerOp::Conv { b, .. } => *b,
            _ => None,
        }
    }

    pub fn weight(&self) -> Option<ParamId> {
        match &self.op {
            LayerOp::Linear { w, .. } | LayerOp::Conv { w, .. } => Some(*w),
            _ => None,
        }
    }

    /// All tensors owned by this layer, adapters included.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.base_params();
        if let Some(a) = &self.adapter {
            ids.extend([a.a, a.b]);
        }
        ids
    }

    /// The `d × k` matrix view an adapter factorizes: `[d_in, d_out]` for
    /// linear layers, `[out, in/groups · kh · kw]` for convolutions.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match &self.op {
            LayerOp::Linear { d_in, d_out, .. } => Some((*d_in, *d_out)),
            LayerOp::Conv { in_ch, out_ch, kernel, spec, .. } => Some((*out_ch, in_ch / spec.groups * kernel.0 * kernel.1)),
            _ => None,
        }
    }

    fn adapter_delta(&self, g: &mut Graph, params: &ParamStore, ad: &Adapter) -> Result<Var> {
        let (a, b) = (g.param(params, ad.a), g.param(params, ad.b));
        let ab = g.matmul(a, b)?;
        g.scale(ab, ad.scale())
    }

    /// Applies a linear layer to `x [.., d_in]`.
    pub fn linear(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let LayerOp::Linear { w, b, .. } = &self.op else {
            return Err(crate::Error::Graph(format!("layer {} is not linear", self.name)));
        };
        let wv = g.param(params, *w);
        let mut y = g.matmul(x, wv)?;
        if let Some(b) = b {
            let bv = g.param(params, *b);
            let axis = g.shape(y).len() - 1;
            y = g.bias_add(y, bv, axis)?;
        }
        if let Some(ad) = &self.adapter {
            let xd = g.dropout(x, ad.dropout)?;
            let (a, bb) = (g.param(params, ad.a), g.param(params, ad.b));
            let h = g.matmul(xd, a)?;
            let h = g.matmul(h, bb)?;
            let h = g.scale(h, ad.scale())?;
            y = g.add(y, h)?;
        }
        Ok(y)
    }

    /// Applies a convolution to `x [N, C, H, W]`. With an adapter, the
    /// update is folded into the kernel unless adapter dropout is active.
    pub fn conv(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let LayerOp::Conv { w, b, spec, .. } = &self.op else {
            return Err(crate::Error::Graph(format!("layer {} is not a convolution", self.name)));
        };
        let wv = g.param(params, *w);
        let kshape = g.shape(wv).to_vec();
        let mut y = match &self.adapter {
            None => g.conv2d(x, wv, *spec)?,
            Some(ad) => {
                let delta = self.adapter_delta(g, params, ad)?;
                let delta = g.reshape(delta, &kshape)?;
                if g.is_train() && ad.dropout > 0.0 {
                    let base = g.conv2d(x, wv, *spec)?;
                    let xd = g.dropout(x, ad.dropout)?;
                    let upd = g.conv2d(xd, delta, *spec)?;
                    g.add(base, upd)?
                } else {
                    let merged = g.add(wv, delta)?;
                    g.conv2d(x, merged, *spec)?
                }
            }
        };
        if let Some(b) = b {
            let bv = g.param(params, *b);
            y = g.bias_add(y, bv, 1)?;
        }
        Ok(y)
    }

    pub fn norm(&self, g: &mut Graph, params: &ParamStore, buffers: &[BnBuffer], x: Var) -> Result<Var> {
        match &self.op {
            LayerOp::LayerNorm { gamma, beta, .. } => {
                let (ga, be) = (g.param(params, *gamma), g.param(params, *beta));
                g.layer_norm(x, ga, be, NORM_EPS)
            }
            LayerOp::GroupNorm { gamma, beta, groups, .. } => {
                let (ga, be) = (g.param(params, *gamma), g.param(params, *beta));
                g.group_norm(x, ga, be, *groups, NORM_EPS)
            }
            LayerOp::BatchNorm { gamma, beta, buffer, .. } => {
                let (ga, be) = (g.param(params, *gamma), g.param(params, *beta));
                let buf = &buffers[*buffer];
                let stats = BnStats {
                    buffer: *buffer,
                    running_mean: &buf.mean,
                    running_var: &buf.var,
                    momentum: BN_MOMENTUM,
                };
                g.batch_norm(x, ga, be, stats, NORM_EPS)
            }
            _ => Err(crate::Error::Graph(format!("layer {} is not a norm", self.name))),
        }
    }

    pub fn embed(&self, g: &mut Graph, params: &ParamStore, indices: &[usize]) -> Result<Var> {
        let LayerOp::Embedding { table, .. } = &self.op else {
            return Err(crate::Error::Graph(format!("layer {} is not an embedding", self.name)));
        };
        let t = g.param(params, *table);
        g.gather(t, indices)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Draws `n` values from a normal of std `std`, resampling beyond ±2σ.
pub fn trunc_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

pub fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

pub const TRANSFORMER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    KaimingUniform,
}

/// Appends layers to a parameter store with per-tensor seeded init.
pub(crate) struct Builder {
    pub params: ParamStore,
    pub layers: Vec<Layer>,
    pub buffers: Vec<BnBuffer>,
    seed: u64,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            params: ParamStore::new(),
            layers: Vec::new(),
            buffers: Vec::new(),
            seed,
        }
    }

    fn rng(&self, name: &str) -> rand_chacha::ChaCha8Rng {
        crate::seed::rng(crate::seed::derive(self.seed, &["init", name]))
    }

    fn tensor(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> ParamId {
        let t = Tensor::new(shape.to_vec(), values).expect("init matches shape");
        self.params.add(name, t, true)
    }

    fn push(&mut self, name: &str, kind: LayerKind, op: LayerOp) -> usize {
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            op,
            adapter: None,
        });
        self.layers.len() - 1
    }

    pub fn linear(&mut self, name: &str, kind: LayerKind, d_in: usize, d_out: usize, bias: bool) -> usize {
        let wname = format!("{name}.weight");
        let values = trunc_normal(&mut self.rng(&wname), d_in * d_out, TRANSFORMER_INIT_STD);
        let w = self.tensor(wname, &[d_in, d_out], values);
        let b = bias.then(|| self.tensor(format!("{name}.bias"), &[d_out], vec![0.0; d_out]));
        self.push(name, kind, LayerOp::Linear { w, b, d_in, d_out })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
    ) -> usize {
        let fan_in = in_ch / spec.groups * kernel.0 * kernel.1;
        let wname = format!("{name}.weight");
        let n = out_ch * fan_in;
        let values = match init {
            Init::KaimingUniform => uniform(&mut self.rng(&wname), n, (6.0 / fan_in as f64).sqrt()),
        };
        let w = self.tensor(wname, &[out_ch, in_ch / spec.groups, kernel.0, kernel.1], values);
        let b = bias.then(|| self.tensor(format!("{name}.bias"), &[out_ch], vec![0.0; out_ch]));
        self.push(name, LayerKind::Conv, LayerOp::Conv { w, b, in_ch, out_ch, kernel, spec })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> usize {
        let gamma = self.tensor(format!("{name}.weight"), &[dim], vec![1.0; dim]);
        let beta = self.tensor(format!("{name}.bias"), &[dim], vec![0.0; dim]);
        self.push(name, LayerKind::Norm, LayerOp::LayerNorm { gamma, beta, dim })
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> usize {
        let gamma = self.tensor(format!("{name}.weight"), &[channels], vec![1.0; channels]);
        let beta = self.tensor(format!("{name}.bias"), &[channels], vec![0.0; channels]);
        self.push(name, LayerKind::Norm, LayerOp::GroupNorm { gamma, beta, channels, groups })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> usize {
        let gamma = self.tensor(format!("{name}.weight"), &[channels], vec![1.0; channels]);
        let beta = self.tensor(format!("{name}.bias"), &[channels], vec![0.0; channels]);
        self.buffers.push(BnBuffer {
            name: name.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        let buffer = self.buffers.len() - 1;
        self.push(name, LayerKind::Norm, LayerOp::BatchNorm { gamma, beta, channels, buffer })
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> usize {
        let tname = format!("{name}.weight");
        let values = trunc_normal(&mut self.rng(&tname), rows * dim, TRANSFORMER_INIT_STD);
        let table = self.tensor(tname, &[rows, dim], values);
        self.push(name, LayerKind::Embedding, LayerOp::Embedding { table, rows, dim })
    }
}
