use serde::{Deserialize, Serialize};

use super::channels::{map_channels, MappingReport, DEFAULT_THRESHOLD_MM};
use super::filter::{sosfiltfilt, FilterSpec, BUTTERWORTH_ORDER, NOTCH_Q};
use super::montage::NEUROGPT_CHANNELS;
use super::patch::{patchify, MAX_PATCHES};
use super::{car, resample, Montage, PatchedInput, Recording, TrialSet};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Labram,
    Neurogpt,
}

impl std::str::FromStr for Style {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labram" => Ok(Style::Labram),
            "neurogpt" => Ok(Style::Neurogpt),
            other => Err(crate::Error::InvalidArgument(format!("unknown pipeline style `{other}` (expected labram or neurogpt)"))),
        }
    }
}

/// Every constant of a preprocessing pipeline. Stage order is fixed per style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub style: Style,
    pub fs: f64,
    pub band: (f64, f64),
    pub filter_order: usize,
    pub notches: Vec<f64>,
    pub notch_q: f64,
    pub threshold_mm: f64,
    pub max_patches: usize,
    /// Target channel order for the mapping stage (neurogpt style).
    pub channels: Vec<String>,
}

impl PipelineConfig {
    pub fn labram() -> Self {
        PipelineConfig {
            style: Style::Labram,
            fs: 200.0,
            band: (0.5, 45.0),
            filter_order: BUTTERWORTH_ORDER,
            notches: vec![50.0, 60.0, 100.0],
            notch_q: NOTCH_Q,
            threshold_mm: DEFAULT_THRESHOLD_MM,
            max_patches: MAX_PATCHES,
            channels: Vec::new(),
        }
    }

    pub fn neurogpt() -> Self {
        PipelineConfig {
            style: Style::Neurogpt,
            fs: 250.0,
            band: (0.05, 100.0),
            filter_order: BUTTERWORTH_ORDER,
            notches: vec![50.0, 100.0, 60.0, 120.0],
            notch_q: NOTCH_Q,
            threshold_mm: DEFAULT_THRESHOLD_MM,
            max_patches: MAX_PATCHES,
            channels: NEUROGPT_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn for_style(style: Style) -> Self {
        match style {
            Style::Labram => Self::labram(),
            Style::Neurogpt => Self::neurogpt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub detail: String,
    pub applied: bool,
}

impl Stage {
    fn done(name: &str, detail: String) -> Self {
        Stage { name: name.into(), detail, applied: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Patched(PatchedInput),
    Channels(Recording),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub input: ModelInput,
    pub stages: Vec<Stage>,
    pub mapping: Option<MappingReport>,
}

fn map_rows(rec: &Recording, f: impl Fn(&[f64]) -> Result<Vec<f64>>, fs: f64) -> Result<Recording> {
    let mut data = Vec::with_capacity(rec.data().len());
    for row in rec.rows() {
        data.extend(f(row)?);
    }
    rec.with_data(data, fs)
}

/// Signal stages of the pipeline (everything up to, not including,
/// patching). Notches at or above Nyquist are skipped and recorded.
pub fn process(rec: &Recording, cfg: &PipelineConfig) -> Result<(Recording, Vec<Stage>, Option<MappingReport>)> {
    let mut stages = Vec::new();
    let mut cur = map_rows(rec, |r| resample(r, rec.fs, cfg.fs), cfg.fs)?;
    stages.push(Stage::done("resample", format!("{} Hz -> {} Hz", rec.fs, cfg.fs)));

    let (lo, hi) = cfg.band;
    let bp = FilterSpec::Bandpass { lo, hi, order: cfg.filter_order }.sections(cfg.fs)?;
    cur = map_rows(&cur, |r| Ok(sosfiltfilt(&bp, r)), cfg.fs)?;
    stages.push(Stage::done("bandpass", format!("{lo}-{hi} Hz, order {}", cfg.filter_order)));

    for &f0 in &cfg.notches {
        if f0 >= cfg.fs / 2.0 {
            stages.push(Stage {
                name: "notch".into(),
                detail: format!("{f0} Hz skipped: not below Nyquist ({} Hz)", cfg.fs / 2.0),
                applied: false,
            });
            continue;
        }
        let s = FilterSpec::Notch { f0, q: cfg.notch_q }.sections(cfg.fs)?;
        cur = map_rows(&cur, |r| Ok(sosfiltfilt(&s, r)), cfg.fs)?;
        stages.push(Stage::done("notch", format!("{f0} Hz, Q {}", cfg.notch_q)));
    }

    let mut mapping = None;
    if cfg.style == Style::Neurogpt {
        let labels: Vec<&str> = cfg.channels.iter().map(String::as_str).collect();
        let target = Montage::standard().select(&labels)?;
        let (mapped, report) = map_channels(&cur, &target, cfg.threshold_mm)?;
        stages.push(Stage::done(
            "map_channels",
            format!("{} targets, {} zero-filled, threshold {} mm", target.len(), report.zero_count(), cfg.threshold_mm),
        ));
        cur = mapped;
        mapping = Some(report);
    }

    cur = car(&cur)?;
    stages.push(Stage::done("car", format!("{} channels", cur.n_channels())));
    Ok((cur, stages, mapping))
}

/// Full pipeline producing the model-ready input for one recording.
pub fn pipeline(rec: &Recording, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let (cur, mut stages, mapping) = process(rec, cfg)?;
    let input = match cfg.style {
        Style::Labram => {
            let p = patchify(&cur, Montage::standard(), cfg.max_patches)?;
            stages.push(Stage::done("patchify", format!("{} valid of {} patches", p.attention_length, cfg.max_patches)));
            ModelInput::Patched(p)
        }
        Style::Neurogpt => ModelInput::Channels(cur),
    };
    Ok(PipelineOutput { input, stages, mapping })
}

/// Applies the signal stages to every trial of a set. The mapping report
/// depends only on the channel layout, so one report covers the set.
pub fn process_set(set: &TrialSet, cfg: &PipelineConfig) -> Result<(TrialSet, Vec<Stage>, Option<MappingReport>)> {
    set.validate()?;
    ensure!(!set.is_empty(), InvalidArgument, "trial set is empty");
    let mut recs = Vec::with_capacity(set.len());
    let mut meta = None;
    for i in 0..set.len() {
        let (r, stages, mapping) = process(&set.trial(i)?, cfg)?;
        recs.push(r);
        meta.get_or_insert((stages, mapping));
    }
    let (stages, mapping) = meta.expect("set is nonempty");
    Ok((TrialSet::from_recordings(&recs, set.n_classes)?, stages, mapping))
}
