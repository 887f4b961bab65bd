// Checks a small conv → batch norm → ReLU → pool → linear → cross-entropy
// graph against central finite differences, in f64.

use dualbranch::autodiff::{BatchNormState, GradCheck, Mode, Reduction};
use dualbranch::Tensor;

pub fn run_example() -> dualbranch::Result<f64> {
    let x = Tensor::<f64>::from_fn(&[2, 8, 3], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
    let w = Tensor::<f64>::from_fn(&[4, 3, 3], |i| ((i * 5 % 13) as f64 - 6.0) / 10.0);
    let b = Tensor::<f64>::from_fn(&[4], |i| i as f64 * 0.1);
    let gamma = Tensor::<f64>::from_fn(&[4], |i| 1.0 + i as f64 * 0.2);
    let beta = Tensor::<f64>::from_fn(&[4], |i| i as f64 * -0.1);
    let fw = Tensor::<f64>::from_fn(&[3, 16], |i| ((i * 3 % 7) as f64 - 3.0) / 7.0);
    let fb = Tensor::<f64>::zeros(&[3]);
    let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])?;

    let report = GradCheck::new(1e-6).run(
        |g, v| {
            let mut bn = BatchNormState::new(4);
            let h = g.conv1d(v[0], v[1], v[2], 1)?;
            let h = g.batch_norm(h, v[3], v[4], &mut bn, Mode::Train)?;
            let h = g.relu(h)?;
            let h = g.maxpool1d(h)?;
            let h = g.reshape(h, &[2, 16])?;
            let logits = g.linear(h, v[5], v[6])?;
            Ok(g.softmax_cross_entropy(logits, &targets, Reduction::Mean)?.0)
        },
        &[x, w, b, gamma, beta, fw, fb],
    )?;
    println!(
        "checked {} coordinates, max relative error {:.2e}",
        report.coords_checked, report.max_rel_error
    );
    Ok(report.max_rel_error)
}

fn main() {
    run_example().unwrap();
}
