//! Rectified linear activation.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu_forward<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < E::ZERO {
            *v = E::ZERO;
        }
    }
    out
}

/// Masks the upstream gradient by `input > 0`; the derivative at exactly
/// zero is taken to be zero.
pub fn relu_backward<E: Element>(input: &Tensor<E>, upstream: &Tensor<E>) -> Result<Tensor<E>> {
    if !input.same_shape(upstream) {
        return Err(Error::shape("relu backward shape mismatch"));
    }
    let mut out = upstream.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= E::ZERO {
            *g = E::ZERO;
        }
    }
    Ok(out)
}
