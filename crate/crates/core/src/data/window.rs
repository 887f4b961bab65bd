use log::warn;
use serde::{Deserialize, Serialize};

use super::recording::Recording;
use crate::error::{Error, Result};

/// 200 ms at 2048 Hz, rounded to the 408 samples the network expects.
pub const DEFAULT_WINDOW: usize = 408;
/// 10 ms at 2048 Hz.
pub const DEFAULT_STEP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub window: usize,
    pub step: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window", "must be >= 1"));
        }
        if self.step == 0 {
            return Err(Error::invalid("step", "must be >= 1"));
        }
        Ok(())
    }

    /// `⌊(T − window)/step⌋ + 1`, or 0 when `T < window`.
    pub fn count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.step + 1
        }
    }

    pub fn starts(&self, samples: usize) -> impl Iterator<Item = usize> {
        let step = self.step;
        (0..self.count(samples)).map(move |i| i * step)
    }
}

/// A window cut from a recording, by reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub recording: usize,
    pub start: usize,
}

/// A recording shorter than one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShortRecording {
    pub recording: usize,
    pub samples: usize,
    pub window: usize,
}

/// Window start offsets for one recording: `0, step, 2·step, …`; a trailing
/// partial window is dropped. Recordings shorter than a window yield nothing.
pub fn sliding_window(recording: &Recording, params: WindowParams) -> Vec<usize> {
    let t = recording.samples();
    if t < params.window {
        warn!(
            "recording s{} g{} t{} has {t} samples, fewer than one {}-sample window",
            recording.subject_id, recording.gesture_id, recording.trial_id, params.window
        );
    }
    params.starts(t).collect()
}

/// Windows for every recording in order, plus one record per skipped recording.
pub fn window_all(recordings: &[Recording], params: WindowParams) -> (Vec<WindowRef>, Vec<ShortRecording>) {
    let mut windows = Vec::new();
    let mut short = Vec::new();
    for (i, r) in recordings.iter().enumerate() {
        let starts = sliding_window(r, params);
        if starts.is_empty() {
            short.push(ShortRecording {
                recording: i,
                samples: r.samples(),
                window: params.window,
            });
        }
        windows.extend(starts.into_iter().map(|start| WindowRef { recording: i, start }));
    }
    (windows, short)
}
