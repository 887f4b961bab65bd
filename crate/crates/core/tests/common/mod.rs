#![allow(dead_code)]

use std::sync::Arc;

use dualbranch::data::{make_folds, split_fold, synthesize, FoldSplit, SynthConfig, WindowParams};

/// A small synthetic fold with short windows so models train in milliseconds.
pub fn toy_split(n_subjects: usize, n_gestures: usize, mixing: f64, window: usize, step: usize, seed: u64) -> FoldSplit {
    let cfg = SynthConfig {
        n_subjects,
        n_gestures,
        trials: 2,
        duration_s: 0.1,
        mixing,
        noise: 0.1,
        seed,
        ..SynthConfig::default()
    };
    let recs = Arc::new(synthesize(&cfg).unwrap());
    let ids: Vec<u32> = (1..=n_subjects as u32).collect();
    let plan = make_folds(&ids, 4.min(n_subjects), seed).unwrap();
    split_fold(recs, &plan, 0, WindowParams { window, step }, true).unwrap()
}

pub mod oracle;
