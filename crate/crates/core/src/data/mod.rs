//! Sample ingestion, preprocessing, augmentation, synthetic data and
//! sliding-window inference.

mod augment;
mod dataset;
pub mod mft;
mod sample;
mod sliding;
mod synth;

pub use augment::{augment, crop, rotate_scale, AugmentConfig};
pub use dataset::{write_dataset, CaseEntry, Dataset, DatasetManifest, MANIFEST};
pub use mft::{read_mft, write_mft, MftData, MftFile};
pub use sample::{apply_stats, foreground_stats, normalize_intensity, resample, IntensityStats, SegSample, STD_FLOOR};
pub use sliding::{sliding_window_infer, window_starts, Segmenter};
pub use synth::synth_task;
