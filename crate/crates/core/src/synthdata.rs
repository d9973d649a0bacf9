//! Deterministic synthetic EEG: pink noise plus a class-specific
//! oscillation on a subset of channels, scaled by a per-subject gain.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::signalprep::{Electrode, Montage, TrialSet};

/// Electrode labels assigned to synthetic channels, in order.
pub const SYNTH_LABELS: [&str; 22] = [
    "Fz", "C3", "Cz", "C4", "Pz", "O1", "Oz", "O2", "Fp1", "Fp2", "F3", "F4", "F7", "F8", "T7", "T8", "P3", "P4", "P7", "P8", "FCz",
    "CPz",
];

/// Octave rows of the pink-noise generator.
const PINK_ROWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub freq_hz: f64,
    /// Channel indices carrying the oscillation.
    pub channels: Vec<usize>,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub fs: f64,
    pub duration_s: f64,
    pub classes: Vec<ClassSpec>,
    pub noise_std: f64,
    /// Subject gains are drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 20,
            trials_per_subject: 30,
            channels: 8,
            fs: 200.0,
            duration_s: 4.0,
            classes: vec![
                ClassSpec { freq_hz: 10.0, channels: vec![1, 2, 3], amplitude: 0.5 },
                ClassSpec { freq_hz: 22.0, channels: vec![1, 2, 3], amplitude: 0.5 },
            ],
            noise_std: 1.0,
            gain_jitter: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_samples(&self) -> usize {
        (self.fs * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.subjects >= 1 && self.trials_per_subject >= 1, InvalidArgument, "need at least one subject and one trial");
        ensure!(self.channels >= 1 && self.channels <= SYNTH_LABELS.len(), InvalidArgument, "channel count must be in 1..={}", SYNTH_LABELS.len());
        ensure!(self.fs > 0.0 && self.fs.is_finite() && self.duration_s > 0.0, InvalidArgument, "rate and duration must be positive");
        ensure!(self.n_samples() >= 1, InvalidArgument, "trials would hold no samples");
        ensure!(self.classes.len() >= 2, InvalidArgument, "need at least two classes");
        ensure!(self.noise_std >= 0.0 && self.noise_std.is_finite(), InvalidArgument, "noise_std must be non-negative");
        ensure!((0.0..1.0).contains(&self.gain_jitter), InvalidArgument, "gain_jitter must lie in [0, 1)");
        for (i, c) in self.classes.iter().enumerate() {
            ensure!(c.freq_hz > 0.0 && c.freq_hz < self.fs / 2.0, InvalidArgument, "class {} frequency {} Hz not below Nyquist", i, c.freq_hz);
            ensure!(c.amplitude > 0.0, InvalidArgument, "class {} amplitude must be positive", i);
            ensure!(!c.channels.is_empty() && c.channels.iter().all(|&ch| ch < self.channels), InvalidArgument, "class {} channels out of range", i);
        }
        Ok(())
    }

    pub fn electrodes(&self) -> Vec<Electrode> {
        Montage::standard().select(&SYNTH_LABELS[..self.channels]).expect("synthetic labels are standard")
    }
}

/// Voss–McCartney pink noise with unit-ish variance.
fn pink(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut rows = [0.0f64; PINK_ROWS];
    for r in &mut rows {
        *r = rng.sample(StandardNormal);
    }
    let norm = ((PINK_ROWS + 1) as f64).sqrt();
    (0..n)
        .map(|i| {
            // Row k refreshes every 2^k samples, on the trailing-zero count.
            if i > 0 {
                let k = (i.trailing_zeros() as usize).min(PINK_ROWS - 1);
                rows[k] = rng.sample(StandardNormal);
            }
            let white: f64 = rng.sample(StandardNormal);
            (rows.iter().sum::<f64>() + white) / norm
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<TrialSet> {
    spec.validate()?;
    let n = spec.n_samples();
    let n_ch = spec.channels;
    let n_cls = spec.classes.len();
    let total = spec.subjects * spec.trials_per_subject;
    let mut data = Vec::with_capacity(total * n_ch * n);
    let (mut labels, mut subjects) = (Vec::with_capacity(total), Vec::with_capacity(total));
    for s in 0..spec.subjects {
        let sid = format!("S{:03}", s + 1);
        let mut rng = crate::seed::rng(crate::seed::derive(spec.seed, &["synth", &sid]));
        let gain = 1.0 + spec.gain_jitter * rng.random_range(-1.0..=1.0);
        let mut ls: Vec<usize> = (0..spec.trials_per_subject).map(|i| i % n_cls).collect();
        ls.shuffle(&mut rng);
        for &label in &ls {
            let class = &spec.classes[label];
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * class.freq_hz / spec.fs;
            for ch in 0..n_ch {
                let noise = pink(&mut rng, n);
                let amp = if class.channels.contains(&ch) { class.amplitude } else { 0.0 };
                data.extend((0..n).map(|t| gain * (spec.noise_std * noise[t] + amp * (w * t as f64 + phase).sin())));
            }
            labels.push(label);
            subjects.push(sid.clone());
        }
    }
    let set = TrialSet { fs: spec.fs, channels: spec.electrodes(), n_samples: n, n_classes: n_cls, labels, subjects, data };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pink_noise_has_more_low_than_high_power() {
        let mut rng = crate::seed::rng(1);
        let x = pink(&mut rng, 1 << 14);
        let diff: f64 = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        // White noise gives diff ≈ 2·var; low-frequency mass pulls it below.
        assert!(diff < 1.5 * var, "diff {diff} var {var}");
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = SynthSpec { subjects: 0, ..SynthSpec::default() };
        assert!(generate(&s).is_err());
        s = SynthSpec { channels: 0, ..SynthSpec::default() };
        assert!(generate(&s).is_err());
        s = SynthSpec::default();
        s.classes[0].freq_hz = 100.0;
        assert!(generate(&s).is_err());
    }
}
