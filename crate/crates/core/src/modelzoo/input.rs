use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::signalprep::{patchify, Montage, PatchedInput, TrialSet};

/// What a model consumes per trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Raw `[channels × samples]` matrix.
    Signals { channels: usize, samples: usize },
    /// Sequence of one-second patches with temporal and spatial indices.
    Patches { max_patches: usize, patch_len: usize },
}

/// A batch in the layout the model's forward pass expects.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    /// `data` is `[batch, channels, samples]`.
    Signals { data: Vec<f64>, batch: usize, channels: usize, samples: usize },
    /// `data` is `[batch, n_patches, patch_len]`; index vectors are
    /// `[batch, n_patches]`; `lengths` counts valid patches per sample.
    Patches {
        data: Vec<f64>,
        batch: usize,
        n_patches: usize,
        patch_len: usize,
        temporal: Vec<usize>,
        spatial: Vec<usize>,
        lengths: Vec<usize>,
    },
}

impl BatchInput {
    pub fn batch(&self) -> usize {
        match self {
            BatchInput::Signals { batch, .. } | BatchInput::Patches { batch, .. } => *batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stored {
    Signals(Vec<f64>),
    Patches(Vec<PatchedInput>),
}

/// A trial set converted once into model input form, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub spec: InputSpec,
    stored: Stored,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
    pub n_classes: usize,
}

impl PreparedData {
    pub fn new(set: &TrialSet, spec: InputSpec) -> Result<Self> {
        set.validate()?;
        let stored = match spec {
            InputSpec::Signals { channels, samples } => {
                ensure!(set.channels.len() == channels && set.n_samples == samples, Shape, "model expects {} x {} trials, data has {} x {}", channels, samples, set.channels.len(), set.n_samples);
                Stored::Signals(set.data.clone())
            }
            InputSpec::Patches { max_patches, patch_len } => {
                ensure!(set.fs == patch_len as f64, Shape, "model expects {}-sample patches (one second), data is sampled at {} Hz", patch_len, set.fs);
                let mut out = Vec::with_capacity(set.len());
                for i in 0..set.len() {
                    let p = patchify(&set.trial(i)?, Montage::standard(), max_patches)?;
                    ensure!(p.attention_length > 0, Shape, "trial {} yields no patches", i);
                    out.push(p);
                }
                Stored::Patches(out)
            }
        };
        Ok(PreparedData {
            spec,
            stored,
            labels: set.labels.clone(),
            subjects: set.subjects.clone(),
            n_classes: set.n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> BatchInput {
        match (&self.stored, self.spec) {
            (Stored::Signals(data), InputSpec::Signals { channels, samples }) => {
                let per = channels * samples;
                let mut out = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    out.extend_from_slice(&data[i * per..(i + 1) * per]);
                }
                BatchInput::Signals { data: out, batch: idx.len(), channels, samples }
            }
            (Stored::Patches(ps), InputSpec::Patches { max_patches, patch_len }) => {
                let mut data = Vec::with_capacity(idx.len() * max_patches * patch_len);
                let (mut temporal, mut spatial, mut lengths) = (Vec::new(), Vec::new(), Vec::new());
                for &i in idx {
                    let p = &ps[i];
                    data.extend_from_slice(&p.patches);
                    temporal.extend_from_slice(&p.temporal_index);
                    spatial.extend_from_slice(&p.spatial_index);
                    lengths.push(p.attention_length);
                }
                BatchInput::Patches { data, batch: idx.len(), n_patches: max_patches, patch_len, temporal, spatial, lengths }
            }
            _ => unreachable!("stored layout always follows spec"),
        }
    }
}
