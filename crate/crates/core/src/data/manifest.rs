//! On-disk dataset interchange format.
//!
//! A dataset is a directory holding `manifest.json` and one file per
//! recording:
//!
//! ```json
//! {
//!   "recordings": [
//!     {"subject_id": 1, "gesture_id": 2, "trial_id": 1, "sample_rate": 2048.0,
//!      "channels": 8, "file": "s1_g2_t1.f32", "samples": 10240}
//!   ],
//!   "excluded_subjects": [7],
//!   "subject_ids": [1, 2, 3],
//!   "gesture_ids": [2, 3, 4, 5, 16, 17]
//! }
//! ```
//!
//! `.f32` files hold `samples × channels` little-endian 32-bit floats, row
//! major. `.csv` files have a header row `ch0,…,ch{D-1}` and one row per
//! sample. The last three keys are optional: recordings of excluded subjects
//! are skipped, and when `subject_ids` / `gesture_ids` are present any
//! recording outside them is a load error.
//!
//! # Converting GRABMyo
//!
//! The public GRABMyo release is not downloaded by this crate. To use it,
//! write a manifest with one entry per (participant, gesture, trial) of the
//! day-1 session, keeping only the 8 forearm channels (wrist channels are
//! dropped), `sample_rate` 2048, and the gestures listed in
//! [`GRABMYO_GESTURES`]. Participants removed for poor preliminary accuracy go
//! in `excluded_subjects`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::recording::Recording;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Gesture ids used for the forearm day-1 GRABMyo experiments.
pub const GRABMYO_GESTURES: [u32; 6] = [2, 3, 4, 5, 16, 17];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub gesture_id: u32,
    pub trial_id: u32,
    pub sample_rate: f64,
    pub channels: usize,
    pub file: String,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recordings: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_subjects: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gesture_ids: Option<Vec<u32>>,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Manifest {
    /// Reads `manifest.json` from a dataset directory or an explicit file path.
    pub fn read(path: &Path) -> Result<Self> {
        let file = manifest_path(path);
        let text = fs::read_to_string(&file).map_err(|e| load_err(&file, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| load_err(&file, format!("malformed manifest: {e}")))
    }
}

/// Loads every non-excluded recording listed in the manifest, ordered by
/// (subject, gesture, trial).
pub fn load_manifest(path: &Path) -> Result<Vec<Recording>> {
    let file = manifest_path(path);
    let manifest = Manifest::read(&file)?;
    let root = file.parent().unwrap_or(Path::new("."));
    let excluded: BTreeSet<u32> = manifest.excluded_subjects.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for e in &manifest.recordings {
        if let Some(ids) = &manifest.subject_ids {
            if !ids.contains(&e.subject_id) {
                return Err(load_err(&file, format!("unknown subject id {} for {}", e.subject_id, e.file)));
            }
        }
        if let Some(ids) = &manifest.gesture_ids {
            if !ids.contains(&e.gesture_id) {
                return Err(load_err(&file, format!("unknown gesture id {} for {}", e.gesture_id, e.file)));
            }
        }
        if !seen.insert((e.subject_id, e.gesture_id, e.trial_id)) {
            return Err(load_err(
                &file,
                format!("duplicate recording s{} g{} t{}", e.subject_id, e.gesture_id, e.trial_id),
            ));
        }
        if excluded.contains(&e.subject_id) {
            continue;
        }
        let data_path = root.join(&e.file);
        let signal = read_signal(&data_path, e.channels, e.samples)?;
        let rec = Recording::new(e.subject_id, e.gesture_id, e.trial_id, e.sample_rate, e.channels, signal)
            .map_err(|err| load_err(&data_path, err.to_string()))?;
        out.push(rec);
    }
    out.sort_by_key(|r| r.key());
    Ok(out)
}

fn read_signal(path: &Path, channels: usize, samples: usize) -> Result<Vec<f32>> {
    let is_csv = path
        .extension()
        .is_some_and(|x| x.eq_ignore_ascii_case("csv"));
    let signal = if is_csv {
        read_csv(path, channels)?
    } else {
        let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
        if bytes.len() != samples * channels * 4 {
            return Err(load_err(
                path,
                format!(
                    "{} bytes, expected {samples} samples × {channels} channels × 4",
                    bytes.len()
                ),
            ));
        }
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    };
    if signal.len() != samples * channels {
        return Err(load_err(
            path,
            format!("{} rows, manifest says {samples}", signal.len() / channels),
        ));
    }
    Ok(signal)
}

fn read_csv(path: &Path, channels: usize) -> Result<Vec<f32>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| load_err(path, e.to_string()))?.clone();
    if header.len() != channels {
        return Err(load_err(
            path,
            format!("{} columns, manifest says {channels} channels", header.len()),
        ));
    }
    for (j, h) in header.iter().enumerate() {
        if h.trim() != format!("ch{j}") {
            return Err(load_err(path, format!("column {j} is {h:?}, expected \"ch{j}\"")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| load_err(path, e.to_string()))?;
        for v in row.iter() {
            let x: f32 = v
                .trim()
                .parse()
                .map_err(|_| load_err(path, format!("row {}: {v:?} is not a number", i + 1)))?;
            out.push(x);
        }
    }
    Ok(out)
}

/// Writes recordings as `.f32` files plus `manifest.json` into `dir`.
pub fn save_manifest(dir: &Path, recordings: &[Recording]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for r in recordings {
        let file = format!("s{}_g{}_t{}.f32", r.subject_id, r.gesture_id, r.trial_id);
        let bytes: Vec<u8> = r.signal().iter().flat_map(|x| x.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.recordings.push(ManifestEntry {
            subject_id: r.subject_id,
            gesture_id: r.gesture_id,
            trial_id: r.trial_id,
            sample_rate: r.sample_rate,
            channels: r.channels(),
            file,
            samples: r.samples(),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
