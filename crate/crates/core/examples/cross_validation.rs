// Runs every variant over all four subject folds and writes the
// methods × folds summary.

use dualbranch::data::SynthConfig;
use dualbranch::experiment::{cmd_crossval, CrossvalSummary, DataSource, ExperimentSpec, FoldSelection};
use dualbranch::network::Variant;
use dualbranch::training::TrainConfig;

pub fn run_example() -> dualbranch::Result<CrossvalSummary> {
    let synth = SynthConfig {
        n_subjects: 8,
        n_gestures: 2,
        trials: 2,
        duration_s: 0.05,
        ..SynthConfig::default()
    };
    let train = TrainConfig {
        epochs: 1,
        batch_size: 16,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let out = std::env::temp_dir().join(format!("dualbranch-crossval-{}", std::process::id()));
    let mut spec = ExperimentSpec::new(DataSource::Synth(synth), train, out.clone());
    spec.folds = FoldSelection::All;
    spec.window = 32;
    spec.step = 16;
    let summary = cmd_crossval(&spec, &Variant::ALL)?;
    for v in &summary.variants {
        println!("{:>8}: fold accuracies {:.3?}", v.variant.to_string(), v.accuracy);
    }
    println!("summary written to {}", out.join("summary.csv").display());
    let _ = std::fs::remove_dir_all(&out);
    Ok(summary)
}

fn main() {
    run_example().unwrap();
}
