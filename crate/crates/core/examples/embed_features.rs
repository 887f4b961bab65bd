// Exports original, pattern-specific and subject-specific features of a
// trained model and projects each onto its first two principal components.

use std::sync::Arc;

use dualbranch::data::{make_folds, split_fold, synthesize, SynthConfig, WindowParams};
use dualbranch::experiment::features_of;
use dualbranch::metrics::{davies_bouldin, pca_project};
use dualbranch::network::{FeatureKind, Variant};
use dualbranch::training::{train, TrainConfig};

pub fn run_example() -> dualbranch::Result<Vec<(FeatureKind, usize)>> {
    let cfg = SynthConfig {
        n_subjects: 4,
        n_gestures: 3,
        trials: 2,
        duration_s: 0.1,
        ..SynthConfig::default()
    };
    let plan = make_folds(&cfg.subject_ids(), 4, 0)?;
    let split = split_fold(Arc::new(synthesize(&cfg)?), &plan, 0, WindowParams { window: 32, step: 16 }, true)?;
    let config = TrainConfig {
        variant: Variant::Proposed,
        epochs: 2,
        batch_size: 32,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let model = train(&split.train, &config, None)?.model;
    let patterns: Vec<usize> = split.train.infos().iter().map(|i| i.pattern).collect();

    let mut widths = Vec::new();
    for which in [FeatureKind::Original, FeatureKind::Pattern, FeatureKind::Subject] {
        let (features, width) = features_of(&model, &split.train, which)?;
        let proj = pca_project(&features, width, 2)?;
        let dbi = davies_bouldin(&features, width, &patterns)?;
        println!(
            "{which:?}: {} x {width}, pattern DBI {dbi:.3}, explained variance {:.3?}",
            split.train.len(),
            proj.explained_variance
        );
        widths.push((which, width));
    }
    Ok(widths)
}

fn main() {
    run_example().unwrap();
}
