use serde::{Deserialize, Serialize};

use super::Electrode;
use crate::error::{ensure, Result};

/// One epoched trial: `data` is channel-major `[channels × samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    data: Vec<f64>,
    samples: usize,
    pub fs: f64,
    pub channels: Vec<Electrode>,
    pub subject: String,
    pub label: Option<usize>,
}

impl Recording {
    pub fn new(data: Vec<f64>, fs: f64, channels: Vec<Electrode>, subject: impl Into<String>, label: Option<usize>) -> Result<Self> {
        ensure!(fs > 0.0 && fs.is_finite(), InvalidArgument, "sampling rate must be positive, got {}", fs);
        ensure!(!channels.is_empty(), InvalidArgument, "recording has no channels");
        ensure!(data.len() % channels.len() == 0, Shape, "{} samples do not split over {} channels", data.len(), channels.len());
        ensure!(data.iter().all(|v| v.is_finite()), InvalidArgument, "recording holds non-finite samples");
        let samples = data.len() / channels.len();
        Ok(Recording {
            data,
            samples,
            fs,
            channels,
            subject: subject.into(),
            label,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.fs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.samples.max(1))
    }

    /// Replaces the sample matrix (and rate), keeping channel metadata.
    pub(crate) fn with_data(&self, data: Vec<f64>, fs: f64) -> Result<Self> {
        Recording::new(data, fs, self.channels.clone(), self.subject.clone(), self.label)
    }
}

/// A labelled collection of equally shaped trials sharing one channel
/// layout and sampling rate. `data` is trial-major, each trial
/// `[channels × samples]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub fs: f64,
    pub channels: Vec<Electrode>,
    pub n_samples: usize,
    pub n_classes: usize,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl TrialSet {
    pub fn validate(&self) -> Result<()> {
        let per = self.channels.len() * self.n_samples;
        ensure!(self.fs > 0.0 && self.fs.is_finite(), InvalidArgument, "sampling rate must be positive, got {}", self.fs);
        ensure!(!self.channels.is_empty() && self.n_samples > 0, Shape, "trials must have channels and samples");
        ensure!(self.labels.len() == self.subjects.len(), Shape, "{} labels for {} subject ids", self.labels.len(), self.subjects.len());
        ensure!(self.data.len() == self.labels.len() * per, Shape, "{} values for {} trials of {} x {}", self.data.len(), self.labels.len(), self.channels.len(), self.n_samples);
        ensure!(self.n_classes >= 1, InvalidArgument, "class count must be positive");
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(crate::Error::InvalidArgument(format!("label {bad} out of range for {} classes", self.n_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial_len(&self) -> usize {
        self.channels.len() * self.n_samples
    }

    pub fn trial_data(&self, i: usize) -> &[f64] {
        let per = self.trial_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn trial(&self, i: usize) -> Result<Recording> {
        Recording::new(self.trial_data(i).to_vec(), self.fs, self.channels.clone(), self.subjects[i].clone(), Some(self.labels[i]))
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subject_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.subjects {
            if !seen.contains(s) {
                seen.push(s.clone());
            }
        }
        seen
    }

    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        let mut data = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            data.extend_from_slice(self.trial_data(i));
        }
        TrialSet {
            fs: self.fs,
            channels: self.channels.clone(),
            n_samples: self.n_samples,
            n_classes: self.n_classes,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            data,
        }
    }

    /// Rebuilds a set from processed recordings, which must share one shape.
    pub fn from_recordings(recs: &[Recording], n_classes: usize) -> Result<TrialSet> {
        ensure!(!recs.is_empty(), InvalidArgument, "no recordings");
        let first = &recs[0];
        let mut set = TrialSet {
            fs: first.fs,
            channels: first.channels.clone(),
            n_samples: first.n_samples(),
            n_classes,
            labels: Vec::with_capacity(recs.len()),
            subjects: Vec::with_capacity(recs.len()),
            data: Vec::with_capacity(recs.len() * first.data().len()),
        };
        for r in recs {
            ensure!(r.n_samples() == set.n_samples && r.channels == set.channels && r.fs == set.fs, Shape, "recordings differ in shape, channels or rate");
            let label = r.label.ok_or_else(|| crate::Error::InvalidArgument("recording has no label".into()))?;
            set.labels.push(label);
            set.subjects.push(r.subject.clone());
            set.data.extend_from_slice(r.data());
        }
        set.validate()?;
        Ok(set)
    }
}
