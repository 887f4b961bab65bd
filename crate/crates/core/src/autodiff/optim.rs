use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Plain stochastic gradient descent: `p ← p − lr·∇p`, then clear `∇p`.
///
/// Every parameter must carry a gradient; nothing is modified otherwise.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], learning_rate: T) -> Result<()> {
    if !(learning_rate > T::zero()) {
        return Err(Error::invalid("learning_rate", "must be positive"));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!(
            "sgd_step: parameter {i} (shape {:?}) has no gradient",
            params[i].shape()
        )));
    }
    for p in params.iter_mut() {
        let g = p.grad().expect("checked above").to_vec();
        for (w, dw) in p.data_mut().iter_mut().zip(g) {
            *w = *w - learning_rate * dw;
        }
        p.clear_grad();
    }
    Ok(())
}
