// A gradient reversal layer is the identity going forward and scales the
// incoming gradient by -λ going back.

use dualbranch::autodiff::{Graph, GrlCoefficient};
use dualbranch::Tensor;

pub fn run_example() -> dualbranch::Result<Vec<(f64, Vec<f64>)>> {
    let weights = [0.5, -2.0, 3.0];
    let mut rows = Vec::new();
    for lambda in [0.0, 0.1, 1.0, 1.5] {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0])?);
        let r = g.gradient_reversal(x, GrlCoefficient::new(lambda)?);
        assert_eq!(g.value(r), g.value(x));
        let y = g.dot_const(r, &weights)?;
        let grads = g.backward(y)?;
        let dx = grads.get(x).expect("x is trainable").to_vec();
        println!("lambda {lambda:>3}: dL/dx = {dx:?}");
        rows.push((lambda, dx));
    }
    Ok(rows)
}

fn main() {
    run_example().unwrap();
}
