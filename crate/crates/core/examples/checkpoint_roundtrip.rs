// Saves a model with its fold metadata and restores it bit for bit.

use dualbranch::checkpoint::{self, CheckpointMeta};
use dualbranch::network::{DualBranchModel, InputSpec, Variant};

pub fn run_example() -> dualbranch::Result<usize> {
    let model = DualBranchModel::new(Variant::Mtl, 6, 30, 42, InputSpec::default())?;
    let meta = CheckpointMeta {
        fold: Some(0),
        train_subjects: (1..=30).collect(),
        gesture_ids: vec![2, 3, 4, 5, 16, 17],
        ..CheckpointMeta::default()
    };
    let bytes = checkpoint::to_bytes(&model, &meta)?;
    let (restored, meta2) = checkpoint::from_bytes(&bytes)?;
    assert_eq!(restored, model);
    assert_eq!(meta2, meta);
    println!("{} parameters, {} bytes", model.param_count(), bytes.len());
    Ok(bytes.len())
}

fn main() {
    run_example().unwrap();
}
