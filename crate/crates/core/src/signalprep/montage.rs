use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Head radius of the idealized spherical montage, in millimetres.
pub const HEAD_RADIUS_MM: f64 = 95.0;

/// Electrode label with its scalp position in millimetres (x right, y
/// front, z up; origin at the head centre).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub label: String,
    pub position: [f64; 3],
}

impl Electrode {
    pub fn new(label: impl Into<String>, position: [f64; 3]) -> Self {
        Electrode {
            label: label.into(),
            position,
        }
    }

    pub fn distance_mm(&self, other: &Electrode) -> f64 {
        distance(self.position, other.position)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ordered list of uniquely labelled electrodes. Label lookup ignores case.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    entries: Vec<Electrode>,
    index: HashMap<String, usize>,
}

impl Montage {
    pub fn new(entries: Vec<Electrode>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            ensure!(e.position.iter().all(|v| v.is_finite()), InvalidArgument, "electrode {} has a non-finite position", e.label);
            let prev = index.insert(e.label.to_ascii_lowercase(), i);
            ensure!(prev.is_none(), InvalidArgument, "duplicate electrode label {}", e.label);
        }
        Ok(Montage { entries, index })
    }

    pub fn entries(&self) -> &[Electrode] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(&label.to_ascii_lowercase()).copied()
    }

    pub fn get(&self, label: &str) -> Option<&Electrode> {
        self.index_of(label).map(|i| &self.entries[i])
    }

    /// Electrodes for `labels`, in that order.
    pub fn select(&self, labels: &[&str]) -> Result<Vec<Electrode>> {
        labels
            .iter()
            .map(|l| {
                self.get(l)
                    .cloned()
                    .ok_or_else(|| crate::Error::InvalidArgument(format!("electrode {l} not in montage")))
            })
            .collect()
    }

    /// The global montage: idealized spherical 10-10 positions plus the
    /// legacy 10-20 aliases (T3/T4/T5/T6) and the T1/T2 temporal sites.
    pub fn standard() -> &'static Montage {
        static STANDARD: OnceLock<Montage> = OnceLock::new();
        STANDARD.get_or_init(|| Montage::new(standard_entries()).expect("standard montage is well formed"))
    }
}

/// The fixed NeuroGPT channel order.
pub const NEUROGPT_CHANNELS: [&str; 22] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T1", "T3", "C3", "Cz", "C4", "T4", "T2", "T5", "P3", "Pz", "P4", "T6", "O1",
    "Oz", "O2",
];

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Spherical interpolation from `a` to `b`; `t` outside [0, 1] continues
/// along the same great circle.
fn slerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    let omega = dot.acos();
    let (sa, sb) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
    [sa * a[0] + sb * b[0], sa * a[1] + sb * b[1], sa * a[2] + sb * b[2]]
}

fn sagittal(deg: f64) -> [f64; 3] {
    let t = deg.to_radians();
    [0.0, t.cos(), t.sin()]
}

/// Point on the 10 % ring; `side` is -1 for the left hemisphere.
fn ring(azimuth_deg: f64, side: f64) -> [f64; 3] {
    let (e, a) = (18f64.to_radians(), azimuth_deg.to_radians());
    unit([side * e.cos() * a.sin(), e.cos() * a.cos(), e.sin()])
}

fn standard_entries() -> Vec<Electrode> {
    let scale = |v: [f64; 3]| [v[0] * HEAD_RADIUS_MM, v[1] * HEAD_RADIUS_MM, v[2] * HEAD_RADIUS_MM];
    let mut out = Vec::new();
    // (row prefix, sagittal angle, ring label prefix)
    let rows = [
        ("AF", 36.0, "AF"),
        ("F", 54.0, "F"),
        ("FC", 72.0, "FT"),
        ("C", 90.0, "T"),
        ("CP", 108.0, "TP"),
        ("P", 126.0, "P"),
        ("PO", 144.0, "PO"),
    ];
    out.push(Electrode::new("Fpz", scale(sagittal(18.0))));
    for side in [-1.0, 1.0] {
        let label = if side < 0.0 { "Fp1" } else { "Fp2" };
        out.push(Electrode::new(label, scale(ring(18.0, side))));
    }
    for (prefix, angle, ring_prefix) in rows {
        let mid = sagittal(angle);
        out.push(Electrode::new(format!("{prefix}z"), scale(mid)));
        for side in [-1.0, 1.0] {
            let edge = ring(angle, side);
            for k in 1..=5usize {
                let number = if side < 0.0 { 2 * k - 1 } else { 2 * k };
                let p = if k >= 4 { ring_prefix } else { prefix };
                out.push(Electrode::new(format!("{p}{number}"), scale(slerp(mid, edge, k as f64 / 4.0))));
            }
        }
    }
    out.push(Electrode::new("Oz", scale(sagittal(162.0))));
    for side in [-1.0, 1.0] {
        let label = if side < 0.0 { "O1" } else { "O2" };
        out.push(Electrode::new(label, scale(ring(162.0, side))));
    }
    let alias = |out: &[Electrode], from: &str| out.iter().find(|e| e.label == from).unwrap().position;
    for (old, new) in [("T3", "T7"), ("T4", "T8"), ("T5", "P7"), ("T6", "P8"), ("T1", "FT9"), ("T2", "FT10")] {
        let p = alias(&out, new);
        out.push(Electrode::new(old, p));
    }
    out
}
