// Trains the dual-branch model on one small synthetic fold and prints the
// per-epoch log.

use std::sync::Arc;

use dualbranch::data::{make_folds, split_fold, synthesize, SynthConfig, WindowParams};
use dualbranch::network::Variant;
use dualbranch::training::{train, TrainConfig, TrainOutcome};

pub fn run_example() -> dualbranch::Result<TrainOutcome> {
    let cfg = SynthConfig {
        n_subjects: 4,
        n_gestures: 3,
        trials: 2,
        duration_s: 0.1,
        ..SynthConfig::default()
    };
    let recordings = Arc::new(synthesize(&cfg)?);
    let plan = make_folds(&cfg.subject_ids(), 4, 0)?;
    let split = split_fold(recordings, &plan, 0, WindowParams { window: 32, step: 16 }, true)?;
    let config = TrainConfig {
        variant: Variant::Proposed,
        epochs: 4,
        batch_size: 32,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let outcome = train(&split.train, &config, None)?;
    for e in &outcome.log {
        println!(
            "epoch {} lambda_s {:.3} lambda_p {:.3} L_p_cls {:.4} L_s_cls {:.4} pattern acc {:.3}",
            e.epoch,
            e.lambda_s,
            e.lambda_p,
            e.l_p_cls,
            e.l_s_cls.unwrap_or(f64::NAN),
            e.train_pattern_acc
        );
    }
    Ok(outcome)
}

fn main() {
    run_example().unwrap();
}
