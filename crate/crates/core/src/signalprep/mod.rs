//! Model-specific EEG preprocessing.
//!
//! Two fixed stage orders are provided. The LaBraM style resamples to
//! 200 Hz, band-passes 0.5-45 Hz, notches mains frequencies, re-references
//! and cuts one-second patches. The NeuroGPT style resamples to 250 Hz,
//! band-passes 0.05-100 Hz, notches mains harmonics, maps onto a fixed
//! 22-channel layout and re-references.

mod channels;
pub mod filter;
mod montage;
mod patch;
mod pipeline;
mod recording;
mod resample;
mod reref;

pub use channels::{map_channels, nearest_sources, ChannelSource, MappingEntry, MappingReport, DEFAULT_THRESHOLD_MM};
pub use filter::{bandpass, notch, FilterSpec};
pub use montage::{distance, Electrode, Montage, HEAD_RADIUS_MM, NEUROGPT_CHANNELS};
pub use patch::{patchify, patchify_labram, PatchedInput, MAX_PATCHES};
pub use pipeline::{pipeline, process, process_set, ModelInput, PipelineConfig, PipelineOutput, Stage, Style};
pub use recording::{Recording, TrialSet};
pub use resample::{resample, resampled_len};
pub use reref::{car, car_matrix};
