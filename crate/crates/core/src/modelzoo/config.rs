use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Declarative description of one model: family-specific backbone, head
/// and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub n_cls: usize,
    #[serde(default)]
    pub init_seed: u64,
    pub arch: Architecture,
    /// Overrides the family's default head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    EegnetLike(EegnetConfig),
    EeginceptionLike(EeginceptionConfig),
    LabramLike(LabramConfig),
    NeurogptFullLike(NeurogptFullConfig),
    NeurogptEncoderLike(NeurogptEncoderConfig),
}

impl Architecture {
    pub fn family(&self) -> &'static str {
        match self {
            Architecture::EegnetLike(_) => "eegnet_like",
            Architecture::EeginceptionLike(_) => "eeginception_like",
            Architecture::LabramLike(_) => "labram_like",
            Architecture::NeurogptFullLike(_) => "neurogpt_full_like",
            Architecture::NeurogptEncoderLike(_) => "neurogpt_encoder_like",
        }
    }

    /// The classification head each family ships with.
    pub fn default_head(&self) -> HeadSpec {
        match self {
            Architecture::EegnetLike(_) | Architecture::EeginceptionLike(_) => HeadSpec::linear(0.0),
            Architecture::LabramLike(_) => HeadSpec::linear(0.5),
            Architecture::NeurogptFullLike(_) => HeadSpec {
                input_dropout: 0.0,
                hidden: vec![256, 32],
                hidden_dropout: vec![0.5, 0.3],
            },
            Architecture::NeurogptEncoderLike(_) => HeadSpec {
                input_dropout: 0.0,
                hidden: vec![256, 32],
                hidden_dropout: vec![0.5, 0.0],
            },
        }
    }
}

/// MLP head: optional dropout on its input, then `Linear → ELU → Dropout`
/// per hidden width, then the output `Linear(.., n_cls)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    #[serde(default)]
    pub input_dropout: f64,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub hidden_dropout: Vec<f64>,
}

impl HeadSpec {
    pub fn linear(input_dropout: f64) -> Self {
        HeadSpec {
            input_dropout,
            hidden: Vec::new(),
            hidden_dropout: Vec::new(),
        }
    }

    /// Parameter count for a given input width and class count.
    pub fn param_count(&self, input: usize, n_cls: usize) -> usize {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(n_cls);
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.hidden.len() == self.hidden_dropout.len(), Config, "head has {} hidden layers but {} dropout rates", self.hidden.len(), self.hidden_dropout.len());
        ensure!(self.hidden.iter().all(|&h| h > 0), Config, "head hidden widths must be positive");
        for &p in std::iter::once(&self.input_dropout).chain(&self.hidden_dropout) {
            ensure!((0.0..1.0).contains(&p), Config, "head dropout {} outside [0, 1)", p);
        }
        Ok(())
    }
}

fn d_dropout() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EegnetConfig {
    pub channels: usize,
    pub samples: usize,
    #[serde(default = "d_f1")]
    pub f1: usize,
    #[serde(default = "d_depth_mult")]
    pub depth_multiplier: usize,
    #[serde(default = "d_f2")]
    pub f2: usize,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_sep_kernel")]
    pub separable_kernel: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

fn d_f1() -> usize {
    8
}
fn d_depth_mult() -> usize {
    2
}
fn d_f2() -> usize {
    16
}
fn d_kernel() -> usize {
    64
}
fn d_sep_kernel() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EeginceptionConfig {
    pub channels: usize,
    pub samples: usize,
    #[serde(default = "d_f1")]
    pub filters: usize,
    #[serde(default = "d_depth_mult")]
    pub depth_multiplier: usize,
    #[serde(default = "d_scales")]
    pub kernels: Vec<usize>,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

fn d_scales() -> Vec<usize> {
    vec![64, 32, 16]
}

/// Convolutional tokenizer turning each one-second patch into a token of
/// width `out_chans · output_width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConvConfig {
    pub out_chans: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "d_groups")]
    pub norm_groups: usize,
}

fn d_groups() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabramConfig {
    #[serde(default = "d_patch_len")]
    pub patch_len: usize,
    #[serde(default = "d_max_patches")]
    pub max_patches: usize,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub temporal_conv: TemporalConvConfig,
    /// Rows of the temporal embedding (longest trial in seconds).
    #[serde(default = "d_time_rows")]
    pub time_embed_rows: usize,
    /// Rows of the spatial embedding; defaults to the global montage size.
    #[serde(default)]
    pub spatial_embed_rows: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

fn d_patch_len() -> usize {
    200
}
fn d_max_patches() -> usize {
    256
}
fn d_embed() -> usize {
    200
}
fn d_time_rows() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeurogptEncoderConfig {
    #[serde(default = "d_ngpt_channels")]
    pub channels: usize,
    #[serde(default = "d_chunks")]
    pub chunks: usize,
    #[serde(default = "d_chunk_len")]
    pub chunk_len: usize,
    #[serde(default = "d_conv_filters")]
    pub filters: usize,
    #[serde(default = "d_temporal_kernel")]
    pub temporal_kernel: usize,
    #[serde(default = "d_pool_kernel")]
    pub pool_kernel: usize,
    #[serde(default = "d_pool_stride")]
    pub pool_stride: usize,
    #[serde(default = "d_enc_depth")]
    pub depth: usize,
    #[serde(default = "d_enc_heads")]
    pub heads: usize,
    #[serde(default = "d_enc_mlp")]
    pub mlp_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

fn d_ngpt_channels() -> usize {
    22
}
fn d_chunks() -> usize {
    2
}
fn d_chunk_len() -> usize {
    500
}
fn d_conv_filters() -> usize {
    40
}
fn d_temporal_kernel() -> usize {
    25
}
fn d_pool_kernel() -> usize {
    75
}
fn d_pool_stride() -> usize {
    15
}
fn d_enc_depth() -> usize {
    6
}
fn d_enc_heads() -> usize {
    10
}
fn d_enc_mlp() -> usize {
    160
}

impl NeurogptEncoderConfig {
    pub fn conv_width(&self) -> usize {
        self.chunk_len + 1 - self.temporal_kernel
    }

    /// Tokens per chunk after pooling.
    pub fn tokens(&self) -> usize {
        (self.conv_width() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Width of one flattened chunk embedding.
    pub fn chunk_dim(&self) -> usize {
        self.tokens() * self.filters
    }

    pub fn samples(&self) -> usize {
        self.chunks * self.chunk_len
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 1 && self.chunks >= 1 && self.filters >= 1, Config, "encoder needs channels, chunks and filters");
        ensure!(self.chunk_len >= self.temporal_kernel, Config, "chunk length {} shorter than temporal kernel {}", self.chunk_len, self.temporal_kernel);
        ensure!(self.conv_width() >= self.pool_kernel && self.pool_stride >= 1, Config, "pooling kernel {} exceeds conv output width {}", self.pool_kernel, self.conv_width());
        check_attention(self.filters, self.heads, self.mlp_dim)?;
        check_dropout(self.dropout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptConfig {
    #[serde(default = "d_gpt_dim")]
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn d_gpt_dim() -> usize {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeurogptFullConfig {
    pub encoder: NeurogptEncoderConfig,
    pub gpt: GptConfig,
}

fn check_attention(dim: usize, heads: usize, mlp: usize) -> Result<()> {
    ensure!(dim > 0 && heads > 0 && mlp > 0, Config, "attention dims must be positive");
    ensure!(dim % heads == 0, Config, "embed dim {} not divisible by {} heads", dim, heads);
    Ok(())
}

fn check_dropout(p: f64) -> Result<()> {
    ensure!((0.0..1.0).contains(&p), Config, "dropout {} outside [0, 1)", p);
    Ok(())
}

impl LabramConfig {
    /// Width of the tokenizer output for one patch.
    pub fn conv_width(&self) -> usize {
        let t = &self.temporal_conv;
        (self.patch_len + 2 * t.padding).saturating_sub(t.kernel) / t.stride.max(1) + 1
    }
}

impl ModelConfig {
    pub fn head_spec(&self) -> HeadSpec {
        self.head.clone().unwrap_or_else(|| self.arch.default_head())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_cls >= 1, Config, "n_cls must be at least 1");
        self.head_spec().validate()?;
        match &self.arch {
            Architecture::EegnetLike(c) => {
                ensure!(c.channels >= 1 && c.f1 >= 1 && c.depth_multiplier >= 1 && c.f2 >= 1, Config, "eegnet dims must be positive");
                ensure!(c.samples >= 32, Config, "eegnet needs at least 32 samples, got {}", c.samples);
                ensure!(c.kernel >= 1 && c.separable_kernel >= 1, Config, "eegnet kernels must be positive");
                check_dropout(c.dropout)
            }
            Architecture::EeginceptionLike(c) => {
                ensure!(c.channels >= 1 && c.filters >= 2 && c.depth_multiplier >= 1, Config, "eeginception dims must be positive");
                ensure!(!c.kernels.is_empty() && c.kernels.iter().all(|&k| k >= 4), Config, "eeginception kernels must be at least 4");
                ensure!(c.samples >= 64, Config, "eeginception needs at least 64 samples, got {}", c.samples);
                check_dropout(c.dropout)
            }
            Architecture::LabramLike(c) => {
                check_attention(c.embed_dim, c.heads, c.mlp_dim)?;
                let t = &c.temporal_conv;
                ensure!(t.out_chans >= 1 && t.kernel >= 1 && t.stride >= 1, Config, "temporal conv dims must be positive");
                ensure!(c.patch_len + 2 * t.padding >= t.kernel, Config, "temporal conv kernel {} exceeds padded patch", t.kernel);
                ensure!(t.norm_groups >= 1 && t.out_chans % t.norm_groups == 0, Config, "{} conv channels do not split into {} norm groups", t.out_chans, t.norm_groups);
                ensure!(
                    t.out_chans * c.conv_width() == c.embed_dim,
                    Config,
                    "tokenizer yields {} x {} = {} features but embed_dim is {}",
                    t.out_chans,
                    c.conv_width(),
                    t.out_chans * c.conv_width(),
                    c.embed_dim
                );
                ensure!(c.max_patches >= 1 && c.time_embed_rows >= 1, Config, "labram token counts must be positive");
                check_dropout(c.dropout)
            }
            Architecture::NeurogptEncoderLike(c) => c.validate(),
            Architecture::NeurogptFullLike(c) => {
                c.encoder.validate()?;
                check_attention(c.gpt.d_model, c.gpt.heads, c.gpt.mlp_dim)?;
                ensure!(c.gpt.depth >= 1, Config, "gpt depth must be at least 1");
                check_dropout(c.gpt.dropout)
            }
        }
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ModelConfig = parse_json(text, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }
}

/// Strict JSON parsing that reports the path of the offending key.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: origin.to_path_buf(),
        location: e.path().to_string(),
        message: e.inner().to_string(),
    })
}
