//! Model families, heads, freezing and parameter accounting.

pub mod config;
mod count;
mod families;
mod input;
pub mod reference;
pub mod layers;
pub mod transformer;

pub use config::{
    parse_json, Architecture, EegnetConfig, EeginceptionConfig, GptConfig, HeadSpec, LabramConfig, ModelConfig, NeurogptEncoderConfig,
    NeurogptFullConfig, TemporalConvConfig,
};
pub use count::{LayerCount, ParamReport};
pub use input::{BatchInput, InputSpec, PreparedData};
pub use layers::{BnBuffer, Layer, LayerKind, LayerOp};

use std::collections::BTreeSet;

use families::{Fwd, Plan};
use layers::{trunc_normal, Builder, TRANSFORMER_INIT_STD};

use crate::diffcore::{BufferUpdate, CheckpointEntry};
use crate::error::{ensure, Error, Result};
use crate::{Graph, Mode, ParamStore, Tensor, Var};

/// Which layers `freeze` turns off.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    All,
    /// Everything but the head.
    Backbone,
    Kinds(BTreeSet<LayerKind>),
}

impl std::str::FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Selector::All),
            "backbone" => Ok(Selector::Backbone),
            other => Err(Error::InvalidArgument(format!("unknown freeze selector {other:?}; expected all or backbone"))),
        }
    }
}

/// A built network: named layers over one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) layers: Vec<Layer>,
    pub(crate) buffers: Vec<BnBuffer>,
    plan: Plan,
    head: Vec<usize>,
    head_spec: HeadSpec,
    head_input: usize,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(config.init_seed);
        let (plan, head_input) = match &config.arch {
            Architecture::EegnetLike(c) => families::build_eegnet(&mut b, c),
            Architecture::EeginceptionLike(c) => families::build_eeginception(&mut b, c),
            Architecture::LabramLike(c) => families::build_labram(&mut b, c),
            Architecture::NeurogptEncoderLike(c) => families::build_neurogpt_encoder(&mut b, c),
            Architecture::NeurogptFullLike(c) => families::build_neurogpt_full(&mut b, c),
        };
        ensure!(head_input >= 1, Config, "backbone of {} produces no features", config.name);
        let head_spec = config.head_spec();
        let mut widths = vec![head_input];
        widths.extend(&head_spec.hidden);
        widths.push(config.n_cls);
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| b.linear(&format!("head.{i}"), LayerKind::Head, w[0], w[1], true))
            .collect();
        Ok(Model {
            config: config.clone(),
            params: b.params,
            layers: b.layers,
            buffers: b.buffers,
            plan,
            head,
            head_spec,
            head_input,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Direct access for weight surgery; layer structure stays fixed.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    pub fn n_cls(&self) -> usize {
        self.config.n_cls
    }

    pub fn head_input(&self) -> usize {
        self.head_input
    }

    pub fn input_spec(&self) -> InputSpec {
        match &self.config.arch {
            Architecture::EegnetLike(c) => InputSpec::Signals { channels: c.channels, samples: c.samples },
            Architecture::EeginceptionLike(c) => InputSpec::Signals { channels: c.channels, samples: c.samples },
            Architecture::LabramLike(c) => InputSpec::Patches { max_patches: c.max_patches, patch_len: c.patch_len },
            Architecture::NeurogptEncoderLike(c) => InputSpec::Signals { channels: c.channels, samples: c.samples() },
            Architecture::NeurogptFullLike(c) => InputSpec::Signals { channels: c.encoder.channels, samples: c.encoder.samples() },
        }
    }

    /// Logits `[batch, n_cls]`.
    pub fn forward(&self, g: &mut Graph, input: &BatchInput) -> Result<Var> {
        self.forward_with(g, &self.params, input)
    }

    /// Forward pass reading tensors from `params`, which must be laid out
    /// like this model's store (a clone, possibly perturbed).
    pub fn forward_with(&self, g: &mut Graph, params: &ParamStore, input: &BatchInput) -> Result<Var> {
        ensure!(input.batch() >= 1, Shape, "empty batch");
        ensure!(params.len() == self.params.len(), Shape, "parameter store holds {} tensors, model has {}", params.len(), self.params.len());
        let f = Fwd { layers: &self.layers, params, buffers: &self.buffers };
        let x = families::forward(&self.plan, &f, g, input)?;
        let mut x = g.dropout(x, self.head_spec.input_dropout)?;
        let last = self.head.len() - 1;
        for (i, &l) in self.head.iter().enumerate() {
            x = self.layers[l].linear(g, params, x)?;
            if i < last {
                x = g.elu(x)?;
                x = g.dropout(x, self.head_spec.hidden_dropout[i])?;
            }
        }
        Ok(x)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict(&self, input: &BatchInput) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval, 0);
        let y = self.forward(&mut g, input)?;
        Ok(g.value(y).clone())
    }

    /// Folds running-statistic updates recorded by a train-mode pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            let buf = &mut self.buffers[u.buffer];
            buf.mean = u.mean;
            buf.var = u.var;
        }
    }

    pub fn is_head(&self, layer: usize) -> bool {
        self.head.contains(&layer)
    }

    pub fn head_layers(&self) -> &[usize] {
        &self.head
    }

    /// Clears `requires_grad` on every base tensor of the selected layers.
    /// Adapters are untouched. Returns the number of layers frozen.
    pub fn freeze(&mut self, selector: &Selector) -> Result<usize> {
        let picked: Vec<usize> = (0..self.layers.len())
            .filter(|&i| match selector {
                Selector::All => true,
                Selector::Backbone => !self.is_head(i),
                Selector::Kinds(k) => k.contains(&self.layers[i].kind),
            })
            .collect();
        if let Selector::Kinds(k) = selector {
            ensure!(k.is_empty() || !picked.is_empty(), InvalidArgument, "freeze selector {:?} matches no layer", k);
        }
        for &i in &picked {
            for id in self.layers[i].base_params() {
                self.params.set_requires_grad(id, false);
            }
        }
        Ok(picked.len())
    }

    /// Fresh head weights from `seed`; biases zero, all head tensors trainable.
    pub fn reinit_head(&mut self, seed: u64) {
        for &l in &self.head {
            let layer = &self.layers[l];
            let w = layer.weight().expect("head layers are linear");
            let p = self.params.get_mut(w);
            let mut rng = crate::seed::rng(crate::seed::derive(seed, &["head", &p.name]));
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&trunc_normal(&mut rng, n, TRANSFORMER_INIT_STD));
            p.requires_grad = true;
            if let Some(b) = layer.bias() {
                let p = self.params.get_mut(b);
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                p.requires_grad = true;
            }
        }
    }

    pub fn count_params(&self) -> ParamReport {
        ParamReport::from_model(self)
    }

    /// Every parameter and running statistic, in store order.
    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut out: Vec<CheckpointEntry> = self
            .params
            .iter()
            .map(|(_, p)| CheckpointEntry { name: p.name.clone(), tensor: p.value.clone() })
            .collect();
        for b in &self.buffers {
            let n = b.mean.len();
            out.push(CheckpointEntry { name: format!("{}.running_mean", b.name), tensor: Tensor::new(vec![n], b.mean.clone()).expect("1-d") });
            out.push(CheckpointEntry { name: format!("{}.running_var", b.name), tensor: Tensor::new(vec![n], b.var.clone()).expect("1-d") });
        }
        out
    }

    /// Loads tensors by name; every model tensor must be present with the
    /// same shape. Unknown entries are an error.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let mut seen = 0;
        for e in entries {
            if let Some(id) = self.params.find(&e.name) {
                let p = self.params.get_mut(id);
                ensure!(p.value.shape() == e.tensor.shape(), Checkpoint, "{}: shape {:?} but model has {:?}", e.name, e.tensor.shape(), p.value.shape());
                p.value = e.tensor.clone();
                seen += 1;
                continue;
            }
            let buf = self.buffers.iter_mut().find_map(|b| {
                if e.name == format!("{}.running_mean", b.name) {
                    Some(&mut b.mean)
                } else if e.name == format!("{}.running_var", b.name) {
                    Some(&mut b.var)
                } else {
                    None
                }
            });
            let Some(buf) = buf else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", e.name)));
            };
            ensure!(buf.len() == e.tensor.numel(), Checkpoint, "{}: length {} but model has {}", e.name, e.tensor.numel(), buf.len());
            buf.copy_from_slice(e.tensor.data());
            seen += 1;
        }
        let want = self.params.len() + 2 * self.buffers.len();
        ensure!(seen == want, Checkpoint, "checkpoint has {} of {} model tensors", seen, want);
        Ok(())
    }
}
