use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One continuous multi-channel EMG trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: u32,
    pub gesture_id: u32,
    pub trial_id: u32,
    pub sample_rate: f64,
    channels: usize,
    /// Row-major `T × D` amplitudes.
    signal: Vec<f32>,
}

/// Identifies a recording without its samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordingKey {
    pub subject_id: u32,
    pub gesture_id: u32,
    pub trial_id: u32,
}

impl Recording {
    pub fn new(
        subject_id: u32,
        gesture_id: u32,
        trial_id: u32,
        sample_rate: f64,
        channels: usize,
        signal: Vec<f32>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::invalid("sample_rate", format!("{sample_rate} must be > 0")));
        }
        if channels == 0 {
            return Err(Error::invalid("channels", "must be >= 1"));
        }
        if !signal.len().is_multiple_of(channels) {
            return Err(Error::invalid(
                "signal",
                format!("{} values is not a multiple of {channels} channels", signal.len()),
            ));
        }
        Ok(Recording {
            subject_id,
            gesture_id,
            trial_id,
            sample_rate,
            channels,
            signal,
        })
    }

    pub fn key(&self) -> RecordingKey {
        RecordingKey {
            subject_id: self.subject_id,
            gesture_id: self.gesture_id,
            trial_id: self.trial_id,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of time samples `T`.
    pub fn samples(&self) -> usize {
        self.signal.len() / self.channels
    }

    pub fn signal(&self) -> &[f32] {
        &self.signal
    }

    /// Rows `start..start + len` as a contiguous slice.
    pub fn rows(&self, start: usize, len: usize) -> &[f32] {
        &self.signal[start * self.channels..(start + len) * self.channels]
    }
}
