// Generates a synthetic multi-subject EMG corpus, writes it as a manifest
// directory and loads it back.

use dualbranch::data::{load_manifest, save_manifest, synthesize, SynthConfig};

pub fn run_example() -> dualbranch::Result<usize> {
    let cfg = SynthConfig {
        n_subjects: 4,
        n_gestures: 3,
        trials: 2,
        duration_s: 0.25,
        ..SynthConfig::default()
    };
    let recordings = synthesize(&cfg)?;
    let dir = std::env::temp_dir().join(format!("dualbranch-synth-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| dualbranch::Error::io(&dir, e))?;
    let manifest = save_manifest(&dir, &recordings)?;
    let back = load_manifest(&dir)?;
    assert_eq!(back, recordings);
    for r in recordings.iter().take(3) {
        println!(
            "subject {} gesture {} trial {}: {} samples x {} channels",
            r.subject_id,
            r.gesture_id,
            r.trial_id,
            r.samples(),
            r.channels()
        );
    }
    println!("{} recordings in {}", manifest.recordings.len(), dir.display());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(back.len())
}

fn main() {
    run_example().unwrap();
}
