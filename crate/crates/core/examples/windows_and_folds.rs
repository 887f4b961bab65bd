// Cuts recordings into overlapping windows, deals subjects into four folds
// and builds one normalized train/test split.

use std::sync::Arc;

use dualbranch::data::{make_folds, split_fold, synthesize, SynthConfig, WindowParams};

pub fn run_example() -> dualbranch::Result<(usize, usize)> {
    let cfg = SynthConfig {
        n_subjects: 8,
        n_gestures: 2,
        trials: 2,
        duration_s: 0.25,
        ..SynthConfig::default()
    };
    let recordings = Arc::new(synthesize(&cfg)?);
    let params = WindowParams { window: 64, step: 32 };
    println!("{} samples per recording -> {} windows", cfg.samples(), params.count(cfg.samples()));

    let plan = make_folds(&cfg.subject_ids(), 4, 7)?;
    for fold in 0..4 {
        println!("fold {fold}: test subjects {:?}", plan.test_subjects(fold));
    }
    let split = split_fold(recordings, &plan, 0, params, true)?;
    let stats = split.train.normalization().expect("normalized");
    println!(
        "fold 0: {} train windows, {} test windows, channel 0 mean {:.3} std {:.3}",
        split.train.len(),
        split.test.len(),
        stats.mean[0],
        stats.std[0]
    );
    Ok((split.train.len(), split.test.len()))
}

fn main() {
    run_example().unwrap();
}
