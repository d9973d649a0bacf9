use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::ops::{backward_op, Op};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Whether stochastic layers (dropout, batch statistics) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// New running statistics computed by a train-mode batch norm. Applied to
/// the owning model after the step; the graph itself never mutates models.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferUpdate {
    pub buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients of every trainable parameter reached by a backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Tape of a single forward pass.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    buffer_updates: Vec<BufferUpdate>,
}

pub(crate) struct Accum<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
    sizes: &'a [usize],
}

impl Accum<'_> {
    /// Runs `f` on the gradient buffer of `v` if `v` needs a gradient.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs[v.0] {
            return;
        }
        let size = self.sizes[v.0];
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; size]);
        f(buf);
    }

    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: crate::seed::rng(seed),
            param_vars: HashMap::new(),
            consumed: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Adds a constant input; it never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a parameter leaf (cached, so repeated use shares one node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn record_buffer_update(&mut self, update: BufferUpdate) {
        self.buffer_updates.push(update);
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Back-propagates from a scalar `loss`. Each graph can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; run a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let needs: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.requires_grad).collect();
        let sizes: Vec<usize> = self.nodes[..n].iter().map(|nd| nd.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut out = Gradients::default();
        if !needs[loss.0] {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => {
                    if out.grads.len() <= id.0 {
                        out.grads.resize(id.0 + 1, None);
                    }
                    let shape = self.nodes[idx].value.shape().to_vec();
                    match &mut out.grads[id.0] {
                        Some(t) => t
                            .data_mut()
                            .iter_mut()
                            .zip(&grad)
                            .for_each(|(a, b)| *a += b),
                        slot => *slot = Some(Tensor::new(shape, grad)?),
                    }
                }
                _ => {
                    let mut acc = Accum {
                        grads: &mut grads,
                        needs: &needs,
                        sizes: &sizes,
                    };
                    backward_op(&self.nodes, idx, &grad, &mut acc);
                }
            }
        }
        Ok(out)
    }
}
