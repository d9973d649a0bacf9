//! Forward and backward rules for every op the model zoo needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::graph::{Accum, BufferUpdate, Node};
use super::{Graph, ParamId, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Zero padding around the two spatial axes of a 2D convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(h: usize, w: usize) -> Self {
        Padding {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }

    /// Padding that keeps the width unchanged at stride 1 (extra column on
    /// the right for even kernels).
    pub fn same_width(kw: usize) -> Self {
        let total = kw - 1;
        Padding {
            top: 0,
            bottom: 0,
            left: total / 2,
            right: total - total / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: Padding,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: Padding::default(),
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn hw(&self) -> usize {
        self.hout * self.wout
    }
    fn chunk(&self) -> usize {
        ((1usize << 18) / (self.k() * self.hw()).max(1)).clamp(1, self.n.max(1))
    }

    /// Fills `cols` ([K, count·HW]) for samples `start..start+count`, group `g`.
    fn im2col(&self, x: &[f64], start: usize, count: usize, g: usize, cols: &mut [f64]) {
        let (hw, kk) = (self.hw(), self.kh * self.kw);
        let width = count * hw;
        let (sh, sw) = self.spec.stride;
        let (pt, pl) = (self.spec.padding.top as isize, self.spec.padding.left as isize);
        for s in 0..count {
            let n = start + s;
            for ci in 0..self.cin_g() {
                let c = g * self.cin_g() + ci;
                let plane = &x[(n * self.cin + c) * self.h * self.w..][..self.h * self.w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = ci * kk + ki * self.kw + kj;
                        let dst = &mut cols[row * width + s * hw..][..hw];
                        for oh in 0..self.hout {
                            let ih = (oh * sh) as isize + ki as isize - pt;
                            let drow = &mut dst[oh * self.wout..][..self.wout];
                            if ih < 0 || ih >= self.h as isize {
                                drow.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let src = &plane[ih as usize * self.w..][..self.w];
                            for (ow, d) in drow.iter_mut().enumerate() {
                                let iw = (ow * sw) as isize + kj as isize - pl;
                                *d = if iw < 0 || iw >= self.w as isize {
                                    0.0
                                } else {
                                    src[iw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], start: usize, count: usize, g: usize, dx: &mut [f64]) {
        let (hw, kk) = (self.hw(), self.kh * self.kw);
        let width = count * hw;
        let (sh, sw) = self.spec.stride;
        let (pt, pl) = (self.spec.padding.top as isize, self.spec.padding.left as isize);
        for s in 0..count {
            let n = start + s;
            for ci in 0..self.cin_g() {
                let c = g * self.cin_g() + ci;
                let plane = &mut dx[(n * self.cin + c) * self.h * self.w..][..self.h * self.w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = ci * kk + ki * self.kw + kj;
                        let src = &cols[row * width + s * hw..][..hw];
                        for oh in 0..self.hout {
                            let ih = (oh * sh) as isize + ki as isize - pt;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            let drow = &mut plane[ih as usize * self.w..][..self.w];
                            for ow in 0..self.wout {
                                let iw = (ow * sw) as isize + kj as isize - pl;
                                if iw >= 0 && iw < self.w as isize {
                                    drow[iw as usize] += src[oh * self.wout + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddConst { x: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    BiasAdd { x: Var, bias: Var, channels: usize, inner: usize },
    Elu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, channels: usize, inner: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    GroupNorm { x: Var, gamma: Var, beta: Var, channels: usize, inner: usize, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize>, in_shape: Vec<usize> },
    MeanAxis { x: Var, axis_len: usize, inner: usize },
    WeightedSum { x: Var, weights: Vec<f64>, t: usize, d: usize },
    Select { x: Var, axis_len: usize, inner: usize, index: usize },
    Gather { table: Var, indices: Vec<usize>, dim: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool2d { x: Var, shape: [usize; 4], kernel: (usize, usize), stride: (usize, usize), out_hw: (usize, usize) },
    Concat { xs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, classes: usize },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param(_) => vec![],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } | Add { a, b } | Mul { a, b } => vec![*a, *b],
            AddConst { x }
            | Scale { x, .. }
            | Elu { x }
            | Gelu { x }
            | Softmax { x, .. }
            | Dropout { x, .. }
            | Reshape { x }
            | Permute { x, .. }
            | MeanAxis { x, .. }
            | WeightedSum { x, .. }
            | Select { x, .. }
            | AvgPool2d { x, .. }
            | Sum { x } => vec![*x],
            BiasAdd { x, bias, .. } => vec![*x, *bias],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } | GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Gather { table, .. } => vec![*table],
            Conv2d { x, w, .. } => vec![*x, *w],
            Concat { xs, .. } => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Running statistics handed to [`Graph::batch_norm`].
pub struct BnStats<'a> {
    pub buffer: usize,
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
    pub momentum: f64,
}

impl Graph {
    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() >= 1 && sb.len() == 2, Shape, "matmul {:?} x {:?}", sa, sb);
        let k = *sa.last().unwrap();
        ensure!(k == sb[0], Shape, "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, n) = (sa.iter().product::<usize>() / k.max(1), sb[1]);
        let m = if k == 0 { sa[..sa.len() - 1].iter().product() } else { m };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// Batched `a [B, m, k] · b [B, k, n]`, or `a · bᵀ` for `b [B, n, k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], Shape, "bmm {:?} x {:?}", sa, sb);
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == kb, Shape, "bmm inner dims {:?} x {:?} (trans_b={})", sa, sb, trans_b);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(m, k, n, &av[i * m * k..], false, &bv[i * k * n..], trans_b, &mut out[i * m * n..], false);
            }
        }
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            "bmm",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Shape, "add {:?} + {:?}", self.shape(a), self.shape(b));
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, "add")
    }

    /// Adds a constant tensor (e.g. an attention mask); gradient passes to `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        ensure!(self.shape(x) == c.shape(), Shape, "add_const {:?} + {:?}", self.shape(x), c.shape());
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddConst { x }, "add_const")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), Shape, "mul {:?} * {:?}", self.shape(a), self.shape(b));
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale { x, c }, "scale")
    }

    /// Adds `bias [C]` along `axis` of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), Shape, "bias axis {} for shape {:?}", axis, shape);
        let (_, channels, inner) = split_axis(&shape, axis);
        ensure!(self.shape(bias) == [channels], Shape, "bias {:?} for axis of size {}", self.shape(bias), channels);
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % channels])
            .collect();
        self.push(Tensor::new(shape, data)?, Op::BiasAdd { x, bias, channels, inner }, "bias_add")
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| elu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Elu { x }, "elu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Gelu { x }, "gelu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Tensor::new(shape, data)?, Op::Softmax { x, cols }, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        ensure!(self.shape(gamma) == [cols] && self.shape(beta) == [cols], Shape, "layer_norm affine shape for width {}", cols);
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let xs = self.value(x).data();
        let rows = xs.len() / cols.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..][..cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std }, "layer_norm")
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`. Train mode uses
    /// batch statistics and records updated running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() >= 2, Shape, "batch_norm needs [N, C, ..], got {:?}", shape);
        let (outer, channels, inner) = split_axis(&shape, 1);
        ensure!(self.shape(gamma) == [channels] && self.shape(beta) == [channels], Shape, "batch_norm affine shape for {} channels", channels);
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let xs = self.value(x).data().to_vec();
        let batch_stats = self.is_train();
        let count = (outer * inner) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        if batch_stats {
            ensure!(outer * inner > 1, Shape, "batch_norm in train mode needs more than one value per channel");
            for o in 0..outer {
                for c in 0..channels {
                    mean[c] += xs[(o * channels + c) * inner..][..inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for o in 0..outer {
                for c in 0..channels {
                    var[c] += xs[(o * channels + c) * inner..][..inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let m = stats.momentum;
            let unbias = count / (count - 1.0);
            self.record_buffer_update(BufferUpdate {
                buffer: stats.buffer,
                mean: stats.running_mean.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect(),
                var: stats.running_var.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect(),
            });
        } else {
            mean.copy_from_slice(stats.running_mean);
            var.copy_from_slice(stats.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let h = (xs[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + b[c];
                }
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, channels, inner, xhat, inv_std, batch_stats },
            "batch_norm",
        )
    }

    /// Group normalization of `[N, C, ...]`: channels are split into
    /// `groups` contiguous groups, each normalized over its channels and all
    /// trailing positions, then scaled and shifted per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() >= 2, Shape, "group_norm needs [N, C, ..], got {:?}", shape);
        let (outer, channels, inner) = split_axis(&shape, 1);
        ensure!(groups >= 1 && channels % groups == 0, Shape, "{} channels do not split into {} groups", channels, groups);
        ensure!(self.shape(gamma) == [channels] && self.shape(beta) == [channels], Shape, "group_norm affine shape for {} channels", channels);
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let xs = self.value(x).data();
        let size = channels / groups * inner;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; outer * groups];
        let mut out = vec![0.0; xs.len()];
        for (gi, chunk) in xs.chunks(size).enumerate() {
            let mean = chunk.iter().sum::<f64>() / size as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (j, v) in chunk.iter().enumerate() {
                let i = gi * size + j;
                let c = (i / inner) % channels;
                xhat[i] = (v - mean) * is;
                out[i] = xhat[i] * g[c] + b[c];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::GroupNorm { x, gamma, beta, channels, inner, groups, xhat, inv_std },
            "group_norm",
        )
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), InvalidArgument, "dropout probability {} outside [0, 1)", p);
        if !self.is_train() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = {
            let rng = self.rng();
            (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
        };
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, "dropout")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        ensure!(perm.len() == in_shape.len(), Shape, "permute {:?} of shape {:?}", perm, in_shape);
        for &p in perm {
            ensure!(p < in_shape.len() && !seen[p], Shape, "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let out = permute_data(self.value(x).data(), &in_shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        self.push(Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec(), in_shape }, "permute")
    }

    /// Mean over `axis` (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), Shape, "mean axis {} of {:?}", axis, shape);
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                for i in 0..inner {
                    out[o * inner + i] += xs[(o * axis_len + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= axis_len as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { x, axis_len, inner }, "mean")
    }

    /// `x [B, T, D]`, constant `weights [B, T]` -> `Σ_t w[b,t] x[b,t,:]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(shape.len() == 3 && weights.len() == shape[0] * shape[1], Shape, "weighted_sum of {:?} with {} weights", shape, weights.len());
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let w = weights[bi * t + ti];
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[bi * d + j] += w * xs[(bi * t + ti) * d + j];
                }
            }
        }
        self.push(Tensor::new(vec![b, d], out)?, Op::WeightedSum { x, weights, t, d }, "weighted_sum")
    }

    /// Picks `index` along `axis` (the axis is removed).
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len() && index < shape[axis], Shape, "select {} on axis {} of {:?}", index, axis, shape);
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * axis_len + index) * inner..][..inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Tensor::new(out_shape, out)?, Op::Select { x, axis_len, inner, index }, "select")
    }

    /// Rows of `table [N, D]` at `indices` -> `[len, D]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        ensure!(shape.len() == 2, Shape, "gather table must be 2-D, got {:?}", shape);
        let (rows, dim) = (shape[0], shape[1]);
        let ts = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            ensure!(i < rows, Shape, "gather index {} out of {} rows", i, rows);
            out.extend_from_slice(&ts[i * dim..][..dim]);
        }
        self.push(
            Tensor::new(vec![indices.len(), dim], out)?,
            Op::Gather { table, indices: indices.to_vec(), dim },
            "gather",
        )
    }

    /// 2D convolution `x [N, Cin, H, W]` with `w [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(sx.len() == 4 && sw.len() == 4, Shape, "conv2d {:?} with kernel {:?}", sx, sw);
        let g = spec.groups;
        ensure!(g >= 1 && sx[1] % g == 0 && sw[0] % g == 0 && sw[1] * g == sx[1], Shape, "conv2d channels {:?} / kernel {:?} / groups {}", sx, sw, g);
        let p = spec.padding;
        let (hp, wp) = (sx[2] + p.top + p.bottom, sx[3] + p.left + p.right);
        ensure!(hp >= sw[2] && wp >= sw[3] && spec.stride.0 > 0 && spec.stride.1 > 0, Shape, "conv2d kernel {:?} larger than padded input {:?}", sw, sx);
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            hout: (hp - sw[2]) / spec.stride.0 + 1,
            wout: (wp - sw[3]) / spec.stride.1 + 1,
            spec,
        };
        let (hw, k, cout_g) = (geom.hw(), geom.k(), geom.cout_g());
        let chunk = geom.chunk();
        let mut out = vec![0.0; geom.n * geom.cout * hw];
        {
            let (xs, ws) = (self.value(x).data(), self.value(w).data());
            let mut cols = vec![0.0; k * chunk * hw];
            let mut tmp = vec![0.0; cout_g * chunk * hw];
            let mut start = 0;
            while start < geom.n {
                let count = chunk.min(geom.n - start);
                let width = count * hw;
                for gi in 0..g {
                    geom.im2col(xs, start, count, gi, &mut cols);
                    gemm(cout_g, k, width, &ws[gi * cout_g * k..], false, &cols, false, &mut tmp, false);
                    for s in 0..count {
                        for o in 0..cout_g {
                            let dst = ((start + s) * geom.cout + gi * cout_g + o) * hw;
                            out[dst..dst + hw].copy_from_slice(&tmp[o * width + s * hw..][..hw]);
                        }
                    }
                }
                start += count;
            }
        }
        let shape = vec![geom.n, geom.cout, geom.hout, geom.wout];
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, geom }, "conv2d")
    }

    /// Average pooling over the two trailing axes of `[N, C, H, W]`, no padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 4 && s[2] >= kernel.0 && s[3] >= kernel.1 && stride.0 > 0 && stride.1 > 0, Shape, "avg_pool2d {:?} over {:?}", kernel, s);
        let shape = [s[0], s[1], s[2], s[3]];
        let (ho, wo) = ((s[2] - kernel.0) / stride.0 + 1, (s[3] - kernel.1) / stride.1 + 1);
        let xs = self.value(x).data();
        let norm = 1.0 / (kernel.0 * kernel.1) as f64;
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        for plane in 0..s[0] * s[1] {
            let src = &xs[plane * s[2] * s[3]..];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..kernel.0 {
                        let row = &src[(oh * stride.0 + i) * s[3] + ow * stride.1..][..kernel.1];
                        acc += row.iter().sum::<f64>();
                    }
                    out[(plane * ho + oh) * wo + ow] = acc * norm;
                }
            }
        }
        self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::AvgPool2d { x, shape, kernel, stride, out_hw: (ho, wo) },
            "avg_pool2d",
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), Shape, "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        ensure!(axis < first.len(), Shape, "concat axis {} of {:?}", axis, first);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                Shape,
                "concat {:?} with {:?} on axis {}",
                first,
                s,
                axis
            );
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..][..w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), outer, widths }, "concat")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        ensure!(shape.len() == 2 && shape[0] == labels.len() && shape[0] > 0, Shape, "cross_entropy logits {:?} for {} labels", shape, labels.len());
        let classes = shape[1];
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; xs.len()];
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            ensure!(y < classes, InvalidArgument, "label {} out of {} classes", y, classes);
            let row = &xs[b * classes..][..classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, classes },
            "cross_entropy",
        )
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn backward_op(nodes: &[Node], idx: usize, dy: &[f64], acc: &mut Accum<'_>) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[idx].op {
        Op::Input | Op::Param(_) => {}
        &Op::MatMul { a, b, m, k, n } => {
            acc.with(a, |da| gemm(m, n, k, dy, false, val(b), true, da, true));
            acc.with(b, |db| gemm(k, m, n, val(a), true, dy, false, db, true));
        }
        &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
            let (av, bv) = (val(a), val(b));
            acc.with(a, |da| {
                for i in 0..batch {
                    gemm(m, n, k, &dy[i * m * n..], false, &bv[i * k * n..], !trans_b, &mut da[i * m * k..], true);
                }
            });
            acc.with(b, |db| {
                for i in 0..batch {
                    if trans_b {
                        gemm(n, m, k, &dy[i * m * n..], true, &av[i * m * k..], false, &mut db[i * k * n..], true);
                    } else {
                        gemm(k, m, n, &av[i * m * k..], true, &dy[i * m * n..], false, &mut db[i * k * n..], true);
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            acc.with(a, |d| add_into(d, dy.iter().copied()));
            acc.with(b, |d| add_into(d, dy.iter().copied()));
        }
        &Op::AddConst { x } | &Op::Reshape { x } => acc.with(x, |d| add_into(d, dy.iter().copied())),
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            acc.with(a, |d| add_into(d, dy.iter().zip(bv).map(|(g, y)| g * y)));
            acc.with(b, |d| add_into(d, dy.iter().zip(av).map(|(g, y)| g * y)));
        }
        &Op::Scale { x, c } => acc.with(x, |d| add_into(d, dy.iter().map(|g| g * c))),
        &Op::BiasAdd { x, bias, channels, inner } => {
            acc.with(x, |d| add_into(d, dy.iter().copied()));
            acc.with(bias, |d| {
                for (i, g) in dy.iter().enumerate() {
                    d[(i / inner) % channels] += g;
                }
            });
        }
        &Op::Elu { x } => {
            let xv = val(x);
            acc.with(x, |d| add_into(d, dy.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * v.exp() })));
        }
        &Op::Gelu { x } => {
            let xv = val(x);
            acc.with(x, |d| add_into(d, dy.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v))));
        }
        &Op::Softmax { x, cols } => {
            let y = nodes[idx].value.data();
            acc.with(x, |d| {
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
            let cols = *cols;
            let g = val(*gamma);
            acc.with(*gamma, |d| {
                for (gr, hr) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                    add_into(d, gr.iter().zip(hr).map(|(a, b)| a * b));
                }
            });
            acc.with(*beta, |d| {
                for gr in dy.chunks(cols) {
                    add_into(d, gr.iter().copied());
                }
            });
            acc.with(*x, |d| {
                let nf = cols as f64;
                for (r, ((dr, gr), hr)) in d.chunks_mut(cols).zip(dy.chunks(cols)).zip(xhat.chunks(cols)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..cols {
                        let dh = gr[j] * g[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..cols {
                        let dh = gr[j] * g[j];
                        dr[j] += inv_std[r] / nf * (nf * dh - s1 - hr[j] * s2);
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, channels, inner, xhat, inv_std, batch_stats } => {
            let (channels, inner) = (*channels, *inner);
            let outer = dy.len() / (channels * inner);
            let g = val(*gamma);
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_h = vec![0.0; channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for i in base..base + inner {
                        sum_dy[c] += dy[i];
                        sum_dy_h[c] += dy[i] * xhat[i];
                    }
                }
            }
            acc.with(*gamma, |d| add_into(d, sum_dy_h.iter().copied()));
            acc.with(*beta, |d| add_into(d, sum_dy.iter().copied()));
            let batch_stats = *batch_stats;
            acc.with(*x, |d| {
                let m = (outer * inner) as f64;
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        let k = g[c] * inv_std[c];
                        for i in base..base + inner {
                            d[i] += if batch_stats {
                                k * (dy[i] - sum_dy[c] / m - xhat[i] * sum_dy_h[c] / m)
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
            });
        }
        Op::GroupNorm { x, gamma, beta, channels, inner, groups, xhat, inv_std } => {
            let (channels, inner) = (*channels, *inner);
            let size = channels / groups * inner;
            let g = val(*gamma);
            acc.with(*gamma, |d| {
                for (i, (gy, h)) in dy.iter().zip(xhat).enumerate() {
                    d[(i / inner) % channels] += gy * h;
                }
            });
            acc.with(*beta, |d| {
                for (i, gy) in dy.iter().enumerate() {
                    d[(i / inner) % channels] += gy;
                }
            });
            acc.with(*x, |d| {
                let m = size as f64;
                for gi in 0..inv_std.len() {
                    let base = gi * size;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in base..base + size {
                        let dh = dy[i] * g[(i / inner) % channels];
                        s1 += dh;
                        s2 += dh * xhat[i];
                    }
                    for i in base..base + size {
                        let dh = dy[i] * g[(i / inner) % channels];
                        d[i] += inv_std[gi] / m * (m * dh - s1 - xhat[i] * s2);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => acc.with(*x, |d| add_into(d, dy.iter().zip(mask).map(|(g, m)| g * m))),
        Op::Permute { x, perm, in_shape } => {
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            let back = permute_data(dy, &out_shape, &inverse_perm(perm));
            acc.with(*x, |d| add_into(d, back));
        }
        &Op::MeanAxis { x, axis_len, inner } => {
            acc.with(x, |d| {
                let outer = dy.len() / inner.max(1);
                let s = 1.0 / axis_len as f64;
                for o in 0..outer {
                    for a in 0..axis_len {
                        for i in 0..inner {
                            d[(o * axis_len + a) * inner + i] += dy[o * inner + i] * s;
                        }
                    }
                }
            });
        }
        Op::WeightedSum { x, weights, t, d: dim } => {
            let (t, dim) = (*t, *dim);
            acc.with(*x, |d| {
                for (bt, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let b = bt / t;
                    for j in 0..dim {
                        d[bt * dim + j] += w * dy[b * dim + j];
                    }
                }
            });
        }
        &Op::Select { x, axis_len, inner, index } => {
            acc.with(x, |d| {
                let outer = dy.len() / inner.max(1);
                for o in 0..outer {
                    add_into(&mut d[(o * axis_len + index) * inner..][..inner], dy[o * inner..][..inner].iter().copied());
                }
            });
        }
        Op::Gather { table, indices, dim } => {
            acc.with(*table, |d| {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut d[i * dim..][..*dim], dy[r * dim..][..*dim].iter().copied());
                }
            });
        }
        &Op::Conv2d { x, w, geom } => conv2d_backward(val(x), val(w), dy, geom, x, w, acc),
        &Op::AvgPool2d { x, shape, kernel, stride, out_hw } => {
            acc.with(x, |d| {
                let (ho, wo) = out_hw;
                let norm = 1.0 / (kernel.0 * kernel.1) as f64;
                for plane in 0..shape[0] * shape[1] {
                    let base = plane * shape[2] * shape[3];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = dy[(plane * ho + oh) * wo + ow] * norm;
                            for i in 0..kernel.0 {
                                let row = base + (oh * stride.0 + i) * shape[3] + ow * stride.1;
                                d[row..row + kernel.1].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
            });
        }
        Op::Concat { xs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&v, &w) in xs.iter().zip(widths) {
                acc.with(v, |d| {
                    for o in 0..*outer {
                        add_into(&mut d[o * w..][..w], dy[o * total + off..][..w].iter().copied());
                    }
                });
                off += w;
            }
        }
        &Op::Sum { x } => acc.with(x, |d| d.iter_mut().for_each(|v| *v += dy[0])),
        Op::CrossEntropy { logits, labels, probs, classes } => {
            let scale = dy[0] / labels.len() as f64;
            acc.with(*logits, |d| {
                for (b, &y) in labels.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        d[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            });
        }
    }
}

fn conv2d_backward(xs: &[f64], ws: &[f64], dy: &[f64], geom: ConvGeom, x: Var, w: Var, acc: &mut Accum<'_>) {
    let (hw, k, cout_g, groups) = (geom.hw(), geom.k(), geom.cout_g(), geom.spec.groups);
    let (need_x, need_w) = (acc.needs(x), acc.needs(w));
    if !need_x && !need_w {
        return;
    }
    let chunk = geom.chunk();
    let mut cols = vec![0.0; k * chunk * hw];
    let mut dyg = vec![0.0; cout_g * chunk * hw];
    let mut dw = vec![0.0; if need_w { ws.len() } else { 0 }];
    let mut dx = vec![0.0; if need_x { xs.len() } else { 0 }];
    let mut start = 0;
    while start < geom.n {
        let count = chunk.min(geom.n - start);
        let width = count * hw;
        for gi in 0..groups {
            for s in 0..count {
                for o in 0..cout_g {
                    let src = ((start + s) * geom.cout + gi * cout_g + o) * hw;
                    dyg[o * width + s * hw..][..hw].copy_from_slice(&dy[src..src + hw]);
                }
            }
            if need_w {
                geom.im2col(xs, start, count, gi, &mut cols);
                gemm(cout_g, width, k, &dyg, false, &cols, true, &mut dw[gi * cout_g * k..], true);
            }
            if need_x {
                gemm(k, cout_g, width, &ws[gi * cout_g * k..], true, &dyg, false, &mut cols, false);
                geom.col2im(&cols, start, count, gi, &mut dx);
            }
        }
        start += count;
    }
    if need_w {
        acc.with(w, |d| add_into(d, dw));
    }
    if need_x {
        acc.with(x, |d| add_into(d, dx));
    }
}
