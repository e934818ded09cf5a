//! Elementwise-add junction.
//!
//! Inputs are summed in the order given; the caller fixes that order (edge
//! creation order in the graph) so results are deterministic.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn add_forward<E: Element>(inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("add junction needs at least one input"))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        if !t.same_shape(first) {
            return Err(Error::shape(format!(
                "add junction shape mismatch: {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// The sum fans the upstream gradient unchanged to every input.
pub fn add_backward<E: Element>(input_count: usize, upstream: &Tensor<E>) -> Vec<Tensor<E>> {
    (0..input_count).map(|_| upstream.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Fill;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::alloc(
            shape,
            Fill::Normal {
                mean: 0.0,
                stddev: 1.0,
                rng: &mut rng,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_input_is_identity() {
        let t = random(&[2, 3], 1);
        assert!(add_forward(&[&t]).unwrap().bit_eq(&t));
    }

    #[test]
    fn zero_branch_preserves() {
        let t = random(&[2, 3], 2);
        let z = Tensor::zeros_like(&t);
        assert!(add_forward(&[&t, &z]).unwrap().bit_eq(&t));
    }

    #[test]
    fn backward_fans_upstream() {
        let up = random(&[4], 3);
        let grads = add_backward(3, &up);
        assert_eq!(grads.len(), 3);
        for g in grads {
            assert!(g.bit_eq(&up));
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(add_forward(&[&a, &b]).is_err());
    }
}
