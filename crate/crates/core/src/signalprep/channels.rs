use serde::{Deserialize, Serialize};

use super::{Electrode, Recording};
use crate::error::{ensure, Result};

/// Default distance within which a source electrode may stand in for a
/// target electrode.
pub const DEFAULT_THRESHOLD_MM: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelSource {
    Source { label: String, index: usize, distance_mm: f64 },
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub target: String,
    pub source: ChannelSource,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub entries: Vec<MappingEntry>,
}

impl MappingReport {
    pub fn zero_count(&self) -> usize {
        self.entries.iter().filter(|e| e.source == ChannelSource::Zero).count()
    }
}

/// Source index for each target: the nearest source electrode when it lies
/// within `threshold_mm`, else `None`. Ties go to the earlier source.
pub fn nearest_sources(sources: &[Electrode], targets: &[Electrode], threshold_mm: f64) -> Vec<Option<(usize, f64)>> {
    targets
        .iter()
        .map(|t| {
            sources
                .iter()
                .enumerate()
                .map(|(i, s)| (i, s.distance_mm(t)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                })
                .filter(|&(_, d)| d <= threshold_mm)
        })
        .collect()
}

/// Re-lays a recording onto `target` order, copying the nearest source row
/// or writing zeros when no source is close enough.
pub fn map_channels(rec: &Recording, target: &[Electrode], threshold_mm: f64) -> Result<(Recording, MappingReport)> {
    ensure!(!target.is_empty(), InvalidArgument, "target channel list is empty");
    ensure!(threshold_mm >= 0.0, InvalidArgument, "threshold must be non-negative, got {}", threshold_mm);
    let n = rec.n_samples();
    let mut data = Vec::with_capacity(target.len() * n);
    let mut report = MappingReport::default();
    for (t, choice) in target.iter().zip(nearest_sources(&rec.channels, target, threshold_mm)) {
        let source = match choice {
            Some((i, d)) => {
                data.extend_from_slice(rec.row(i));
                ChannelSource::Source {
                    label: rec.channels[i].label.clone(),
                    index: i,
                    distance_mm: d,
                }
            }
            None => {
                data.extend(std::iter::repeat_n(0.0, n));
                ChannelSource::Zero
            }
        };
        report.entries.push(MappingEntry {
            target: t.label.clone(),
            source,
        });
    }
    let out = Recording::new(data, rec.fs, target.to_vec(), rec.subject.clone(), rec.label)?;
    Ok((out, report))
}
