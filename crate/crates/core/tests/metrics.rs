mod common;

use common::oracle;
use dualbranch::metrics::{
    accuracy, aggregate_per_subject, binary_auroc, davies_bouldin, macro_auroc, macro_f1, pca_project, PredictionSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(inst: &oracle::Instance) -> PredictionSet {
    PredictionSet::new(inst.probs.clone(), inst.k, inst.labels.clone(), inst.subjects.clone()).unwrap()
}

proptest! {
    #[test]
    fn library_metrics_match_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracle::random_instance(&mut rng, 200, 8);
        let p = set(&inst);
        prop_assert!((accuracy(&p) - oracle::accuracy(&inst.probs, inst.k, &inst.labels)).abs() < 1e-9);
        prop_assert!((macro_f1(&p) - oracle::macro_f1(&inst.probs, inst.k, &inst.labels)).abs() < 1e-9);
        match oracle::macro_auroc(&inst.probs, inst.k, &inst.labels) {
            Some(want) => prop_assert!((macro_auroc(&p).unwrap() - want).abs() < 1e-9),
            None => prop_assert!(macro_auroc(&p).is_err()),
        }
    }

    #[test]
    fn auroc_is_the_pairwise_win_rate(
        scores in prop::collection::vec(0u8..6, 2..60),
        flags in prop::collection::vec(any::<bool>(), 60),
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 5.0).collect();
        let positive = &flags[..scores.len()];
        let got = binary_auroc(&scores, positive);
        let want = oracle::pairwise_auroc(&scores, positive);
        prop_assert_eq!(got.is_some(), want.is_some());
        if let (Some(g), Some(w)) = (got, want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dbi_survives_rotation_translation_and_scale(
        seed in any::<u64>(),
        angle in 0.0f64..std::f64::consts::TAU,
        scale in 0.1f64..10.0,
        shift in (-50.0f64..50.0, -50.0f64..50.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(6..80);
        let k = rng.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let x: Vec<f64> = labels
            .iter()
            .flat_map(|&l| [l as f64 * 3.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let (c, s) = (angle.cos(), angle.sin());
        let y: Vec<f64> = x
            .chunks(2)
            .flat_map(|p| {
                [scale * (c * p[0] - s * p[1]) + shift.0, scale * (s * p[0] + c * p[1]) + shift.1]
            })
            .collect();
        let a = davies_bouldin(&x, 2, &labels).unwrap();
        let b = davies_bouldin(&y, 2, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        prop_assert!((a - oracle::davies_bouldin(&x, 2, &labels)).abs() < 1e-9);
    }

    #[test]
    fn equal_subject_sizes_make_mean_accuracy_pooled(seed in any::<u64>(), per in 1usize..20, subjects in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let n = per * subjects as usize;
        let mut inst = oracle::random_instance(&mut rng, 2, k);
        inst.probs = (0..n)
            .flat_map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(move |v| v / z)
            })
            .collect();
        inst.k = k;
        inst.labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        inst.subjects = (0..n).map(|i| (i / per) as u32 + 1).collect();
        let p = set(&inst);
        let report = aggregate_per_subject(&p).unwrap();
        prop_assert_eq!(report.subjects.len(), subjects as usize);
        prop_assert!((report.accuracy - accuracy(&p)).abs() < 1e-12);
    }

    #[test]
    fn pca_coordinates_are_centered_and_ordered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, f) = (rng.random_range(3..40), rng.random_range(2..6));
        let x: Vec<f64> = (0..n * f).map(|j| rng.random_range(-1.0..1.0) * (1 + j % f) as f64).collect();
        let proj = pca_project(&x, f, 2).unwrap();
        prop_assert_eq!(proj.coords.len(), n * 2);
        for d in 0..2 {
            let mean: f64 = (0..n).map(|i| proj.coords[i * 2 + d]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        prop_assert!(proj.explained_variance[0] + 1e-9 >= proj.explained_variance[1]);
    }
}

#[test]
fn two_cluster_hand_case() {
    let x = [0.0, 0.0, 0.0, 2.0, 10.0, 0.0, 10.0, 2.0];
    assert_eq!(davies_bouldin(&x, 2, &[0, 0, 1, 1]).unwrap(), 0.2);
    assert_eq!(oracle::davies_bouldin(&x, 2, &[0, 0, 1, 1]), 0.2);
}
