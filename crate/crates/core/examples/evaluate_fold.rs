// Trains ERM and Proposed on the same synthetic fold and compares their
// per-subject reports on the held-out subjects.

use std::sync::Arc;

use dualbranch::data::synthesize;
use dualbranch::data::SynthConfig;
use dualbranch::experiment::{run_fold, DataSource, ExperimentSpec};
use dualbranch::metrics::EvalReport;
use dualbranch::network::Variant;
use dualbranch::training::TrainConfig;

pub fn run_example() -> dualbranch::Result<Vec<EvalReport>> {
    let synth = SynthConfig {
        n_subjects: 8,
        n_gestures: 3,
        trials: 2,
        duration_s: 0.1,
        ..SynthConfig::default()
    };
    let train = TrainConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let mut spec = ExperimentSpec::new(DataSource::Synth(synth.clone()), train, std::env::temp_dir());
    spec.window = 32;
    spec.step = 16;
    let recordings = Arc::new(synthesize(&synth)?);

    let mut reports = Vec::new();
    for variant in [Variant::Erm, Variant::Proposed] {
        let run = run_fold(&recordings, &spec, variant, 0)?;
        let r = run.report;
        for s in &r.subjects {
            println!("{variant:>8} subject {}: {} windows, accuracy {:.3}", s.subject_id, s.windows, s.accuracy);
        }
        println!(
            "{variant:>8} mean: accuracy {:.3} f1 {:.3} auroc {:?} dbi {:?}",
            r.accuracy, r.f1, r.auroc, r.dbi
        );
        reports.push(r);
    }
    Ok(reports)
}

fn main() {
    run_example().unwrap();
}
