// Prints the per-window shape after every block of the full-size model
// (408 samples × 8 channels, 6 gestures, 30 training subjects).

use dualbranch::network::{build_model, Variant};
use dualbranch::Tensor;

pub fn run_example() -> dualbranch::Result<Vec<(String, Vec<usize>)>> {
    let model = build_model::<f32>(Variant::Proposed, 6, 30, 0)?;
    let batch = Tensor::<f32>::from_fn(&[2, 408, 8], |i| ((i % 17) as f32 - 8.0) / 8.0);
    let trace = model.shape_trace(&batch)?;
    for (name, shape) in &trace {
        println!("{name:<32} {shape:?}");
    }
    println!("{} parameters", model.param_count());
    Ok(trace)
}

fn main() {
    run_example().unwrap();
}
