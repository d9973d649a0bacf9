//! EEGD: a directory holding `meta.json` and `data.bin` (little-endian f32,
//! trial-major, each trial `channels × samples` row-major).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalprep::{Electrode, TrialSet};

pub const SCHEMA_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMeta {
    pub name: String,
    /// Millimetres, head-centred.
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMeta {
    pub subject_id: String,
    pub label: usize,
    /// Byte offset of the trial in `data.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub schema_version: u32,
    pub fs: f64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub channels: Vec<ChannelMeta>,
    pub subjects: Vec<String>,
    pub trials: Vec<TrialMeta>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Container(format!("{}: {msg}", path.display()))
}

impl Meta {
    pub fn from_set(set: &TrialSet) -> Meta {
        let bytes = (set.trial_len() * 4) as u64;
        let mut subjects: Vec<String> = Vec::new();
        for s in &set.subjects {
            if !subjects.contains(s) {
                subjects.push(s.clone());
            }
        }
        Meta {
            schema_version: SCHEMA_VERSION,
            fs: set.fs,
            n_samples: set.n_samples,
            n_classes: set.n_classes,
            channels: set.channels.iter().map(|e| ChannelMeta { name: e.label.clone(), position: e.position }).collect(),
            subjects,
            trials: set
                .labels
                .iter()
                .zip(&set.subjects)
                .enumerate()
                .map(|(i, (&label, s))| TrialMeta { subject_id: s.clone(), label, offset: i as u64 * bytes })
                .collect(),
        }
    }

    fn check(&self, path: &Path, payload: u64) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(path, format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) || self.channels.is_empty() || self.n_samples == 0 || self.n_classes == 0 {
            return Err(bad(path, "fs, channels, n_samples and n_classes must be positive"));
        }
        let bytes = (self.channels.len() * self.n_samples * 4) as u64;
        for (i, t) in self.trials.iter().enumerate() {
            if t.offset != i as u64 * bytes {
                return Err(bad(path, format!("trial {i} offset {} breaks the contiguous trial-major layout", t.offset)));
            }
            if !self.subjects.contains(&t.subject_id) {
                return Err(bad(path, format!("trial {i} names unknown subject {:?}", t.subject_id)));
            }
            if t.label >= self.n_classes {
                return Err(bad(path, format!("trial {i} label {} >= n_classes {}", t.label, self.n_classes)));
            }
        }
        let want = bytes * self.trials.len() as u64;
        if payload != want {
            return Err(bad(path, format!("payload is {payload} bytes, meta implies {want}")));
        }
        Ok(())
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `set` under `dir`, rounding samples to f32.
pub fn write(dir: &Path, set: &TrialSet) -> Result<()> {
    set.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(set.data.len() * 4);
    for &v in &set.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(&dir.join(DATA_FILE), &bytes)?;
    let meta = serde_json::to_vec_pretty(&Meta::from_set(set)).expect("meta serializes");
    atomic_write(&dir.join(META_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    crate::modelzoo::parse_json(&text, &path)
}

pub fn read(dir: &Path) -> Result<TrialSet> {
    let meta = read_meta(dir)?;
    let path = dir.join(DATA_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    meta.check(&path, bytes.len() as u64)?;
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad(&path, "non-finite sample"));
    }
    let set = TrialSet {
        fs: meta.fs,
        channels: meta.channels.iter().map(|c| Electrode::new(c.name.clone(), c.position)).collect(),
        n_samples: meta.n_samples,
        n_classes: meta.n_classes,
        labels: meta.trials.iter().map(|t| t.label).collect(),
        subjects: meta.trials.iter().map(|t| t.subject_id.clone()).collect(),
        data,
    };
    set.validate()?;
    Ok(set)
}
