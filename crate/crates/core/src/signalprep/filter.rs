//! Zero-phase IIR filtering: Butterworth band-pass and biquad notch, both
//! run forward and backward with odd-extension padding and steady-state
//! initial conditions.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// One second-order section `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

pub const BUTTERWORTH_ORDER: usize = 4;
pub const NOTCH_Q: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FilterSpec {
    Bandpass { lo: f64, hi: f64, order: usize },
    Notch { f0: f64, q: f64 },
}

impl FilterSpec {
    pub fn sections(&self, fs: f64) -> Result<Vec<Section>> {
        match *self {
            FilterSpec::Bandpass { lo, hi, order } => butter_bandpass(order, lo, hi, fs),
            FilterSpec::Notch { f0, q } => Ok(vec![notch_section(f0, fs, q)?]),
        }
    }

    pub fn apply(&self, x: &[f64], fs: f64) -> Result<Vec<f64>> {
        Ok(sosfiltfilt(&self.sections(fs)?, x))
    }
}

/// Band-pass Butterworth design of prototype order `order` (so `2·order`
/// poles), as cascaded second-order sections normalized to unit gain at the
/// band centre.
pub fn butter_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Vec<Section>> {
    ensure!(fs > 0.0 && fs.is_finite(), InvalidArgument, "sampling rate must be positive, got {}", fs);
    ensure!(order >= 1, InvalidArgument, "filter order must be at least 1");
    ensure!(0.0 < lo && lo < hi && hi < fs / 2.0, InvalidArgument, "band ({}, {}) Hz must satisfy 0 < lo < hi < fs/2 = {}", lo, hi, fs / 2.0);
    let k = 2.0 * fs;
    let (wl, wh) = (k * (std::f64::consts::PI * lo / fs).tan(), k * (std::f64::consts::PI * hi / fs).tan());
    let (bw, w0) = (wh - wl, (wl * wh).sqrt());

    let mut sections = Vec::with_capacity(order);
    for i in 0..order {
        let theta = std::f64::consts::PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
        let disc = (p * p - w0 * w0).sqrt();
        // Each prototype pole maps to two band-pass poles; keep those in the
        // upper half plane and pair each with its conjugate.
        for s in [p + disc, p - disc] {
            if s.im <= 0.0 {
                continue;
            }
            let z = (k + s) / (k - s);
            sections.push([1.0, 0.0, -1.0, 1.0, -2.0 * z.re, z.norm_sqr()]);
        }
    }
    // Odd prototype orders put a real band-pass pole pair on the real axis.
    if sections.len() < order {
        let p = Complex64::new(-bw / 2.0, 0.0);
        let disc = (p * p - w0 * w0).sqrt();
        let (s1, s2) = (p + disc, p - disc);
        let (z1, z2) = ((k + s1) / (k - s1), (k + s2) / (k - s2));
        sections.push([1.0, 0.0, -1.0, 1.0, -(z1 + z2).re, (z1 * z2).re]);
    }
    sections.truncate(order);

    let fc = fs / std::f64::consts::PI * (w0 / k).atan();
    let gain = response(&sections, fc, fs).norm();
    sections[0][0] /= gain;
    sections[0][2] /= gain;
    Ok(sections)
}

/// Second-order notch at `f0` with quality factor `q`, unit gain at DC.
pub fn notch_section(f0: f64, fs: f64, q: f64) -> Result<Section> {
    ensure!(fs > 0.0 && fs.is_finite(), InvalidArgument, "sampling rate must be positive, got {}", fs);
    ensure!(0.0 < f0 && f0 < fs / 2.0, InvalidArgument, "notch frequency {} Hz must lie strictly inside (0, {}) Hz", f0, fs / 2.0);
    ensure!(q > 0.0, InvalidArgument, "quality factor must be positive, got {}", q);
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok([gain, -2.0 * gain * c, gain, 1.0, -2.0 * gain * c, 2.0 * gain - 1.0])
}

/// Complex frequency response of a section cascade at `f` Hz.
pub fn response(sections: &[Section], f: f64, fs: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f / fs);
    let z2 = z1 * z1;
    sections.iter().fold(Complex64::new(1.0, 0.0), |h, s| {
        h * (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)
    })
}

/// Steady-state initial conditions for a unit step, per section.
fn sos_zi(sections: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sections
        .iter()
        .map(|s| {
            let [b0, b1, b2, _, a1, a2] = *s;
            let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
            // Solve [[1 + a1, -1], [a2, 1]] · z = [r0, r1].
            let z0 = (r0 + r1) / (1.0 + a1 + a2);
            let z1 = r1 - a2 * z0;
            let zi = [scale * z0, scale * z1];
            scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
            zi
        })
        .collect()
}

/// Transposed direct form II cascade, in place.
fn sosfilt(sections: &[Section], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sections.iter().zip(zi) {
        let [b0, b1, b2, _, a1, a2] = *s;
        let (mut z0, mut z1) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z0;
            z0 = b1 * xi - a1 * y + z1;
            z1 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd-extension padding of
/// `3·(2·sections + 1)` samples (shortened for short signals).
pub fn sosfiltfilt(sections: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 || sections.is_empty() {
        return x.to_vec();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = sos_zi(sections);
    let first = ext[0];
    sosfilt(sections, &mut ext, &zi, first);
    ext.reverse();
    let first = ext[0];
    sosfilt(sections, &mut ext, &zi, first);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

pub fn bandpass(x: &[f64], lo: f64, hi: f64, fs: f64) -> Result<Vec<f64>> {
    Ok(sosfiltfilt(&butter_bandpass(BUTTERWORTH_ORDER, lo, hi, fs)?, x))
}

pub fn notch(x: &[f64], f0: f64, fs: f64, q: f64) -> Result<Vec<f64>> {
    Ok(sosfiltfilt(&[notch_section(f0, fs, q)?], x))
}
