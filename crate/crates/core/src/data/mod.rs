//! Recordings, windowing, subject-wise folds, normalization and the
//! synthetic generator.

mod dataset;
mod folds;
mod manifest;
mod recording;
mod synth;
mod window;

pub use dataset::{gesture_space, split_fold, FoldSplit, NormStats, WindowInfo, WindowedDataset, STD_FLOOR};
pub use folds::{make_folds, FoldPlan};
pub use manifest::{load_manifest, save_manifest, Manifest, ManifestEntry, GRABMYO_GESTURES, MANIFEST_FILE};
pub use recording::{Recording, RecordingKey};
pub use synth::{synthesize, SynthConfig};
pub use window::{sliding_window, window_all, ShortRecording, WindowParams, WindowRef, DEFAULT_STEP, DEFAULT_WINDOW};
