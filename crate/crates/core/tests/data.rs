use std::sync::Arc;

use dualbranch::data::{make_folds, sliding_window, split_fold, synthesize, Recording, SynthConfig, WindowParams};
use proptest::prelude::*;

proptest! {
    #[test]
    fn window_count_matches_enumeration(samples in 0usize..400, window in 1usize..100, step in 1usize..50) {
        let p = WindowParams { window, step };
        let brute = (0..samples).filter(|s| s % step == 0 && s + window <= samples).count();
        prop_assert_eq!(p.count(samples), brute);
        prop_assert!(p.starts(samples).all(|s| s + window <= samples));
    }

    #[test]
    fn windows_of_a_recording_stay_inside_it(samples in 1usize..300, window in 1usize..64, step in 1usize..32) {
        let rec = Recording::new(1, 1, 1, 2048.0, 2, vec![0.0; samples * 2]).unwrap();
        let starts = sliding_window(&rec, WindowParams { window, step });
        prop_assert_eq!(starts.len(), WindowParams { window, step }.count(samples));
        prop_assert!(starts.windows(2).all(|w| w[1] - w[0] == step));
    }

    #[test]
    fn folds_partition_subjects(n in 4u32..50, k in 2usize..5, seed in any::<u64>()) {
        let ids: Vec<u32> = (1..=n).collect();
        let plan = make_folds(&ids, k, seed).unwrap();
        let mut seen = Vec::new();
        for f in 0..k {
            let test = plan.test_subjects(f);
            let train = plan.train_subjects(f);
            prop_assert!(test.iter().all(|s| !train.contains(s)));
            prop_assert_eq!(test.len() + train.len(), n as usize);
            seen.extend(test);
        }
        seen.sort();
        prop_assert_eq!(seen, ids.clone());
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut rev = ids;
        rev.reverse();
        prop_assert_eq!(make_folds(&rev, k, seed).unwrap(), plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fold_splits_keep_subjects_apart(seed in 0u64..1000, fold in 0usize..4) {
        let cfg = SynthConfig { n_subjects: 6, n_gestures: 2, trials: 2, duration_s: 0.05, seed, ..SynthConfig::default() };
        let recs = Arc::new(synthesize(&cfg).unwrap());
        let plan = make_folds(&cfg.subject_ids(), 4, seed).unwrap();
        let split = split_fold(recs, &plan, fold, WindowParams { window: 16, step: 8 }, true).unwrap();
        let test = split.test.subjects_present();
        prop_assert!(split.train.subjects_present().iter().all(|s| !test.contains(s)));
        prop_assert_eq!(test, plan.test_subjects(fold));
        // z-scored training channels
        let (n, l, d) = (split.train.len(), 16, split.train.channels());
        let x = split.train.batch(&(0..n).collect::<Vec<_>>()).unwrap();
        for c in 0..d {
            let vals: Vec<f64> = (0..n * l).map(|r| x.data()[r * d + c] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-3, "channel {} mean {}", c, mean);
        }
    }
}
