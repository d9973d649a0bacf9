use serde::{Deserialize, Serialize};

use super::{Montage, Recording};
use crate::error::{ensure, Result};

pub const MAX_PATCHES: usize = 256;

/// Fixed-length sequence of one-second single-channel patches.
///
/// `patches` is `[max_patches × patch_len]`; only the first
/// `attention_length` rows are data, the rest are zero padding with zero
/// indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchedInput {
    pub patches: Vec<f64>,
    pub patch_len: usize,
    pub temporal_index: Vec<usize>,
    pub spatial_index: Vec<usize>,
    pub attention_length: usize,
    /// Channels skipped because the montage does not know them.
    pub dropped_channels: Vec<String>,
}

impl PatchedInput {
    pub fn max_patches(&self) -> usize {
        self.temporal_index.len()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }
}

/// Cuts each montage-known channel into whole seconds, channel-major, and
/// keeps at most `max_patches` of them.
pub fn patchify(rec: &Recording, montage: &Montage, max_patches: usize) -> Result<PatchedInput> {
    let fs = rec.fs.round();
    ensure!(fs == rec.fs && fs >= 1.0, InvalidArgument, "patching needs an integer sampling rate, got {}", rec.fs);
    ensure!(max_patches >= 1, InvalidArgument, "max_patches must be positive");
    let patch_len = fs as usize;
    let seconds = rec.n_samples() / patch_len;
    let mut out = PatchedInput {
        patches: vec![0.0; max_patches * patch_len],
        patch_len,
        temporal_index: vec![0; max_patches],
        spatial_index: vec![0; max_patches],
        attention_length: 0,
        dropped_channels: Vec::new(),
    };
    let mut k = 0;
    for (c, e) in rec.channels.iter().enumerate() {
        let Some(spatial) = montage.index_of(&e.label) else {
            out.dropped_channels.push(e.label.clone());
            continue;
        };
        let row = rec.row(c);
        for s in 0..seconds {
            if k == max_patches {
                break;
            }
            out.patches[k * patch_len..(k + 1) * patch_len].copy_from_slice(&row[s * patch_len..(s + 1) * patch_len]);
            out.temporal_index[k] = s;
            out.spatial_index[k] = spatial;
            k += 1;
        }
    }
    out.attention_length = k;
    Ok(out)
}

/// LaBraM layout: 200 Hz recordings into at most 256 patches.
pub fn patchify_labram(rec: &Recording, montage: &Montage) -> Result<PatchedInput> {
    ensure!(rec.fs == 200.0, InvalidArgument, "LaBraM patching expects 200 Hz input, got {}", rec.fs);
    patchify(rec, montage, MAX_PATCHES)
}
