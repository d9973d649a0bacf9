//! Backbones of the five model families. Each builder registers layers in
//! forward order; each forward returns the flattened features fed to the
//! head.

use super::config::{EegnetConfig, EeginceptionConfig, LabramConfig, NeurogptEncoderConfig, NeurogptFullConfig};
use super::input::BatchInput;
use super::layers::{BnBuffer, Builder, Init, Layer, LayerKind};
use super::transformer::{block, build_block, causal_mask, padding_mask, Block, Ctx};
use crate::diffcore::{Conv2dSpec, Padding};
use crate::error::{ensure, Error, Result};
use crate::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Plan {
    Eegnet { cfg: EegnetConfig, l: [usize; 7] },
    Eeginception { cfg: EeginceptionConfig, b1: Vec<[usize; 4]>, b2: Vec<[usize; 2]>, out: [usize; 4] },
    Labram { cfg: LabramConfig, convs: [usize; 3], norms: [usize; 3], time: usize, space: usize, blocks: Vec<Block>, norm: usize },
    NeurogptEncoder { cfg: NeurogptEncoderConfig, enc: Encoder },
    NeurogptFull { cfg: NeurogptFullConfig, enc: Encoder, proj: usize, pos: usize, blocks: Vec<Block>, norm: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Encoder {
    conv1: usize,
    conv2: usize,
    bn: usize,
    proj: usize,
    blocks: Vec<Block>,
}

pub(crate) struct Fwd<'a> {
    pub layers: &'a [Layer],
    pub params: &'a ParamStore,
    pub buffers: &'a [BnBuffer],
}

impl Fwd<'_> {
    fn conv(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        self.layers[i].conv(g, self.params, x)
    }
    fn norm(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        self.layers[i].norm(g, self.params, self.buffers, x)
    }
    fn ctx(&self) -> Ctx<'_> {
        Ctx { layers: self.layers, params: self.params }
    }
}

fn same(kw: usize) -> Conv2dSpec {
    Conv2dSpec { padding: Padding::same_width(kw), ..Conv2dSpec::default() }
}

fn grouped(kw: usize, groups: usize) -> Conv2dSpec {
    Conv2dSpec { padding: Padding::same_width(kw), groups, ..Conv2dSpec::default() }
}

fn signals(input: &BatchInput) -> Result<(&[f64], usize, usize, usize)> {
    match input {
        BatchInput::Signals { data, batch, channels, samples } => Ok((data, *batch, *channels, *samples)),
        BatchInput::Patches { .. } => Err(Error::Shape("model expects signal input, got patches".into())),
    }
}

pub(crate) fn build_eegnet(b: &mut Builder, c: &EegnetConfig) -> (Plan, usize) {
    let f1d = c.f1 * c.depth_multiplier;
    let l = [
        b.conv("conv_temporal", 1, c.f1, (1, c.kernel), same(c.kernel), false, Init::KaimingUniform),
        b.batch_norm("bn_temporal", c.f1),
        b.conv("conv_spatial", c.f1, f1d, (c.channels, 1), Conv2dSpec { groups: c.f1, ..Conv2dSpec::default() }, false, Init::KaimingUniform),
        b.batch_norm("bn_spatial", f1d),
        b.conv("conv_separable_depth", f1d, f1d, (1, c.separable_kernel), grouped(c.separable_kernel, f1d), false, Init::KaimingUniform),
        b.conv("conv_separable_point", f1d, c.f2, (1, 1), Conv2dSpec::default(), false, Init::KaimingUniform),
        b.batch_norm("bn_separable", c.f2),
    ];
    let width = c.samples / 4 / 8;
    (Plan::Eegnet { cfg: c.clone(), l }, c.f2 * width)
}

fn eegnet(f: &Fwd, g: &mut Graph, c: &EegnetConfig, l: &[usize; 7], input: &BatchInput) -> Result<Var> {
    let (data, batch, ch, t) = signals(input)?;
    let x = g.input(Tensor::new(vec![batch, 1, ch, t], data.to_vec())?);
    let x = f.conv(g, l[0], x)?;
    let x = f.norm(g, l[1], x)?;
    let x = f.conv(g, l[2], x)?;
    let x = f.norm(g, l[3], x)?;
    let x = g.elu(x)?;
    let x = g.avg_pool2d(x, (1, 4), (1, 4))?;
    let x = g.dropout(x, c.dropout)?;
    let x = f.conv(g, l[4], x)?;
    let x = f.conv(g, l[5], x)?;
    let x = f.norm(g, l[6], x)?;
    let x = g.elu(x)?;
    let x = g.avg_pool2d(x, (1, 8), (1, 8))?;
    let x = g.dropout(x, c.dropout)?;
    let n = g.value(x).numel() / batch;
    g.reshape(x, &[batch, n])
}

pub(crate) fn build_eeginception(b: &mut Builder, c: &EeginceptionConfig) -> (Plan, usize) {
    let (f, fd, ns) = (c.filters, c.filters * c.depth_multiplier, c.kernels.len());
    let mut b1 = Vec::new();
    for (i, &k) in c.kernels.iter().enumerate() {
        b1.push([
            b.conv(&format!("block1.{i}.conv"), 1, f, (1, k), same(k), false, Init::KaimingUniform),
            b.batch_norm(&format!("block1.{i}.bn"), f),
            b.conv(&format!("block1.{i}.depthwise"), f, fd, (c.channels, 1), Conv2dSpec { groups: f, ..Conv2dSpec::default() }, false, Init::KaimingUniform),
            b.batch_norm(&format!("block1.{i}.bn_depthwise"), fd),
        ]);
    }
    let mut b2 = Vec::new();
    for (i, &k) in c.kernels.iter().enumerate() {
        let k = (k / 4).max(1);
        b2.push([
            b.conv(&format!("block2.{i}.conv"), ns * fd, f, (1, k), same(k), false, Init::KaimingUniform),
            b.batch_norm(&format!("block2.{i}.bn"), f),
        ]);
    }
    let (c1, c2) = (ns * f / 2, ns * f / 4);
    let out = [
        b.conv("output.conv1", ns * f, c1, (1, 8), same(8), false, Init::KaimingUniform),
        b.batch_norm("output.bn1", c1),
        b.conv("output.conv2", c1, c2, (1, 4), same(4), false, Init::KaimingUniform),
        b.batch_norm("output.bn2", c2),
    ];
    let width = c.samples / 4 / 2 / 2 / 2;
    (Plan::Eeginception { cfg: c.clone(), b1, b2, out }, c2 * width)
}

fn eeginception(f: &Fwd, g: &mut Graph, c: &EeginceptionConfig, b1: &[[usize; 4]], b2: &[[usize; 2]], out: &[usize; 4], input: &BatchInput) -> Result<Var> {
    let (data, batch, ch, t) = signals(input)?;
    let x = g.input(Tensor::new(vec![batch, 1, ch, t], data.to_vec())?);
    let mut branches = Vec::new();
    for l in b1 {
        let h = f.conv(g, l[0], x)?;
        let h = f.norm(g, l[1], h)?;
        let h = g.elu(h)?;
        let h = g.dropout(h, c.dropout)?;
        let h = f.conv(g, l[2], h)?;
        let h = f.norm(g, l[3], h)?;
        let h = g.elu(h)?;
        branches.push(g.dropout(h, c.dropout)?);
    }
    let x = g.concat(&branches, 1)?;
    let x = g.avg_pool2d(x, (1, 4), (1, 4))?;
    let mut branches = Vec::new();
    for l in b2 {
        let h = f.conv(g, l[0], x)?;
        let h = f.norm(g, l[1], h)?;
        let h = g.elu(h)?;
        branches.push(g.dropout(h, c.dropout)?);
    }
    let x = g.concat(&branches, 1)?;
    let mut x = g.avg_pool2d(x, (1, 2), (1, 2))?;
    for pair in out.chunks(2) {
        x = f.conv(g, pair[0], x)?;
        x = f.norm(g, pair[1], x)?;
        x = g.elu(x)?;
        x = g.avg_pool2d(x, (1, 2), (1, 2))?;
        x = g.dropout(x, c.dropout)?;
    }
    let n = g.value(x).numel() / batch;
    g.reshape(x, &[batch, n])
}

pub(crate) fn build_labram(b: &mut Builder, c: &LabramConfig) -> (Plan, usize) {
    let t = &c.temporal_conv;
    let oc = t.out_chans;
    let first = Conv2dSpec { stride: (1, t.stride), padding: Padding::symmetric(0, t.padding), groups: 1 };
    let convs = [
        b.conv("patch_embed.conv1", 1, oc, (1, t.kernel), first, true, Init::KaimingUniform),
        b.conv("patch_embed.conv2", oc, oc, (1, 3), same(3), true, Init::KaimingUniform),
        b.conv("patch_embed.conv3", oc, oc, (1, 3), same(3), true, Init::KaimingUniform),
    ];
    let norms = [
        b.group_norm("patch_embed.norm1", oc, t.norm_groups),
        b.group_norm("patch_embed.norm2", oc, t.norm_groups),
        b.group_norm("patch_embed.norm3", oc, t.norm_groups),
    ];
    // Convs and norms interleave in forward order; registration order only
    // fixes parameter ids.
    let time = b.embedding("time_embed", c.time_embed_rows, c.embed_dim);
    let rows = c.spatial_embed_rows.unwrap_or_else(|| crate::signalprep::Montage::standard().len());
    let space = b.embedding("spatial_embed", rows, c.embed_dim);
    let blocks = (0..c.depth).map(|i| build_block(b, &format!("blocks.{i}"), c.embed_dim, c.mlp_dim)).collect();
    let norm = b.layer_norm("norm", c.embed_dim);
    (Plan::Labram { cfg: c.clone(), convs, norms, time, space, blocks, norm }, c.embed_dim)
}

#[allow(clippy::too_many_arguments)]
fn labram(
    f: &Fwd,
    g: &mut Graph,
    c: &LabramConfig,
    convs: &[usize; 3],
    norms: &[usize; 3],
    time: usize,
    space: usize,
    blocks: &[Block],
    norm: usize,
    input: &BatchInput,
) -> Result<Var> {
    let BatchInput::Patches { data, batch, n_patches, patch_len, temporal, spatial, lengths } = input else {
        return Err(Error::Shape("labram_like expects patch input".into()));
    };
    let (batch, n_patches, patch_len) = (*batch, *n_patches, *patch_len);
    ensure!(patch_len == c.patch_len, Shape, "patch length {} but model expects {}", patch_len, c.patch_len);
    ensure!(lengths.iter().all(|&l| l >= 1 && l <= n_patches), Shape, "every sample needs 1..={} valid patches", n_patches);
    let tm = *lengths.iter().max().expect("batch is nonempty");
    let d = c.embed_dim;

    let mut x = Vec::with_capacity(batch * tm * patch_len);
    let (mut ti, mut si) = (Vec::with_capacity(batch * tm), Vec::with_capacity(batch * tm));
    for b in 0..batch {
        let base = b * n_patches;
        x.extend_from_slice(&data[base * patch_len..(base + tm) * patch_len]);
        ti.extend_from_slice(&temporal[base..base + tm]);
        si.extend_from_slice(&spatial[base..base + tm]);
    }
    let x = g.input(Tensor::new(vec![batch * tm, 1, 1, patch_len], x)?);
    let mut h = x;
    for (&cv, &nm) in convs.iter().zip(norms) {
        h = f.conv(g, cv, h)?;
        h = g.gelu(h)?;
        h = f.norm(g, nm, h)?;
    }
    let s = g.shape(h).to_vec();
    let h = g.reshape(h, &[s[0], s[1], s[3]])?;
    let h = g.permute(h, &[0, 2, 1])?;
    let h = g.reshape(h, &[batch, tm, d])?;

    let te = f.layers[time].embed(g, f.params, &ti)?;
    let te = g.reshape(te, &[batch, tm, d])?;
    let se = f.layers[space].embed(g, f.params, &si)?;
    let se = g.reshape(se, &[batch, tm, d])?;
    let h = g.add(h, te)?;
    let mut h = g.add(h, se)?;

    let trimmed: Vec<usize> = lengths.clone();
    let mask = trimmed.iter().any(|&l| l < tm).then(|| padding_mask(&trimmed, c.heads, tm));
    let ctx = f.ctx();
    for blk in blocks {
        h = block(&ctx, g, blk, h, c.heads, mask.as_ref(), c.dropout)?;
    }
    let h = f.norm(g, norm, h)?;
    let mut w = vec![0.0; batch * tm];
    for (b, &l) in trimmed.iter().enumerate() {
        w[b * tm..b * tm + l].iter_mut().for_each(|v| *v = 1.0 / l as f64);
    }
    g.weighted_sum(h, w)
}

fn build_encoder(b: &mut Builder, c: &NeurogptEncoderConfig, prefix: &str) -> Encoder {
    let f = c.filters;
    Encoder {
        conv1: b.conv(&format!("{prefix}conv_temporal"), 1, f, (1, c.temporal_kernel), Conv2dSpec::default(), true, Init::KaimingUniform),
        conv2: b.conv(&format!("{prefix}conv_spatial"), f, f, (c.channels, 1), Conv2dSpec::default(), true, Init::KaimingUniform),
        bn: b.batch_norm(&format!("{prefix}bn"), f),
        proj: b.conv(&format!("{prefix}conv_proj"), f, f, (1, 1), Conv2dSpec::default(), true, Init::KaimingUniform),
        blocks: (0..c.depth).map(|i| build_block(b, &format!("{prefix}blocks.{i}"), f, c.mlp_dim)).collect(),
    }
}

/// Token sequence `[B·chunks, tokens, filters]` for each signal chunk.
fn encoder(f: &Fwd, g: &mut Graph, c: &NeurogptEncoderConfig, e: &Encoder, input: &BatchInput) -> Result<(Var, usize)> {
    let (data, batch, ch, t) = signals(input)?;
    ensure!(ch == c.channels && t == c.samples(), Shape, "encoder expects {} x {} input, got {} x {}", c.channels, c.samples(), ch, t);
    let x = g.input(Tensor::new(vec![batch, ch, c.chunks, c.chunk_len], data.to_vec())?);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    let n = batch * c.chunks;
    let x = g.reshape(x, &[n, 1, ch, c.chunk_len])?;
    let x = f.conv(g, e.conv1, x)?;
    let x = f.conv(g, e.conv2, x)?;
    let x = f.norm(g, e.bn, x)?;
    let x = g.elu(x)?;
    let x = g.avg_pool2d(x, (1, c.pool_kernel), (1, c.pool_stride))?;
    let x = g.dropout(x, c.dropout)?;
    let x = f.conv(g, e.proj, x)?;
    let x = g.reshape(x, &[n, c.filters, c.tokens()])?;
    let mut x = g.permute(x, &[0, 2, 1])?;
    let ctx = f.ctx();
    for blk in &e.blocks {
        x = block(&ctx, g, blk, x, c.heads, None, c.dropout)?;
    }
    Ok((x, batch))
}

pub(crate) fn build_neurogpt_encoder(b: &mut Builder, c: &NeurogptEncoderConfig) -> (Plan, usize) {
    let enc = build_encoder(b, c, "");
    (Plan::NeurogptEncoder { cfg: c.clone(), enc }, c.chunks * c.chunk_dim())
}

pub(crate) fn build_neurogpt_full(b: &mut Builder, c: &NeurogptFullConfig) -> (Plan, usize) {
    let enc = build_encoder(b, &c.encoder, "encoder.");
    let d = c.gpt.d_model;
    let proj = b.linear("embed_proj", LayerKind::FullyConnected, c.encoder.chunk_dim(), d, true);
    let pos = b.embedding("pos_embed", c.encoder.chunks, d);
    let blocks = (0..c.gpt.depth).map(|i| build_block(b, &format!("gpt.blocks.{i}"), d, c.gpt.mlp_dim)).collect();
    let norm = b.layer_norm("gpt.norm", d);
    (Plan::NeurogptFull { cfg: c.clone(), enc, proj, pos, blocks, norm }, d)
}

pub(crate) fn forward(plan: &Plan, f: &Fwd, g: &mut Graph, input: &BatchInput) -> Result<Var> {
    match plan {
        Plan::Eegnet { cfg, l } => eegnet(f, g, cfg, l, input),
        Plan::Eeginception { cfg, b1, b2, out } => eeginception(f, g, cfg, b1, b2, out, input),
        Plan::Labram { cfg, convs, norms, time, space, blocks, norm } => labram(f, g, cfg, convs, norms, *time, *space, blocks, *norm, input),
        Plan::NeurogptEncoder { cfg, enc } => {
            let (x, batch) = encoder(f, g, cfg, enc, input)?;
            g.reshape(x, &[batch, cfg.chunks * cfg.chunk_dim()])
        }
        Plan::NeurogptFull { cfg, enc, proj, pos, blocks, norm } => {
            let (x, batch) = encoder(f, g, &cfg.encoder, enc, input)?;
            let chunks = cfg.encoder.chunks;
            let d = cfg.gpt.d_model;
            let x = g.reshape(x, &[batch, chunks, cfg.encoder.chunk_dim()])?;
            let x = f.layers[*proj].linear(g, f.params, x)?;
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..chunks).collect();
            let p = f.layers[*pos].embed(g, f.params, &idx)?;
            let p = g.reshape(p, &[batch, chunks, d])?;
            let mut x = g.add(x, p)?;
            let mask = (chunks > 1).then(|| causal_mask(batch, cfg.gpt.heads, chunks));
            let ctx = f.ctx();
            for blk in blocks {
                x = block(&ctx, g, blk, x, cfg.gpt.heads, mask.as_ref(), cfg.gpt.dropout)?;
            }
            let x = f.norm(g, *norm, x)?;
            g.select(x, 1, chunks - 1)
        }
    }
}
