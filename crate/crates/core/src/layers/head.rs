//! Classifier head: global average pool, linear map, softmax cross-entropy.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Element, Fill, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<E: Element> {
    /// classes x features.
    pub weight: Tensor<E>,
    /// classes.
    pub bias: Tensor<E>,
}

/// Cache for the head backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<E: Element> {
    /// batch x features, the pooled activations.
    pub pooled: Tensor<E>,
    /// batch x classes, softmax cross-entropy gradient w.r.t. logits
    /// (softmax - onehot) / batch.
    pub d_logits: Tensor<E>,
    feature_hw: (usize, usize),
}

impl<E: Element> HeadParams<E> {
    pub fn new_he(classes: usize, features: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(HeadParams {
            weight: Tensor::alloc(
                &[classes, features],
                Fill::Normal {
                    mean: 0.0,
                    stddev: (2.0 / features as f64).sqrt(),
                    rng,
                },
            )?,
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Pool spatial dims and apply the linear map.
    pub fn logits(&self, features: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.features() {
            return Err(Error::shape(format!(
                "head expects {} feature channels, got {c}",
                self.features()
            )));
        }
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let mut pooled = Tensor::zeros(&[b, c]);
        for img in 0..b {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let mut sum = E::ZERO;
                for &v in &features.data()[base..base + plane] {
                    sum += v;
                }
                pooled.data_mut()[img * c + ch] = sum * inv;
            }
        }
        let classes = self.classes();
        let mut logits = Tensor::zeros(&[b, classes]);
        for img in 0..b {
            let p = &pooled.data()[img * c..(img + 1) * c];
            for cls in 0..classes {
                let wrow = &self.weight.data()[cls * c..(cls + 1) * c];
                let mut acc = self.bias.data()[cls];
                for i in 0..c {
                    acc = acc.madd(wrow[i], p[i]);
                }
                logits.data_mut()[img * classes + cls] = acc;
            }
        }
        Ok((logits, pooled))
    }

    /// Mean softmax cross-entropy and exact-match accuracy over a batch.
    ///
    /// Also returns the cache needed by [`HeadParams::backward`].
    pub fn loss(
        &self,
        features: &Tensor<E>,
        labels: &[u8],
    ) -> Result<(f64, f64, HeadCache<E>)> {
        let (b, _, h, w) = features.dims4()?;
        if labels.len() != b {
            return Err(Error::data(format!(
                "batch has {b} images but {} labels",
                labels.len()
            )));
        }
        let classes = self.classes();
        for &l in labels {
            if l as usize >= classes {
                return Err(Error::data(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
        }
        let (logits, pooled) = self.logits(features)?;
        let mut d_logits = Tensor::zeros(&[b, classes]);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let inv_b = E::from_f64(1.0 / b as f64);
        for img in 0..b {
            let row = &logits.data()[img * classes..(img + 1) * classes];
            let mut max = row[0];
            let mut argmax = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > max {
                    max = v;
                    argmax = i;
                }
            }
            let mut sum_exp = E::ZERO;
            for &v in row {
                sum_exp += (v - max).exp();
            }
            let log_sum = sum_exp.ln();
            let label = labels[img] as usize;
            loss_sum += (log_sum - (row[label] - max)).to_f64();
            if argmax == label {
                correct += 1;
            }
            let drow = &mut d_logits.data_mut()[img * classes..(img + 1) * classes];
            for (i, slot) in drow.iter_mut().enumerate() {
                let p = (row[i] - max).exp() / sum_exp;
                let y = if i == label { E::ONE } else { E::ZERO };
                *slot = (p - y) * inv_b;
            }
        }
        Ok((
            loss_sum / b as f64,
            correct as f64 / b as f64,
            HeadCache {
                pooled,
                d_logits,
                feature_hw: (h, w),
            },
        ))
    }

    /// Gradients w.r.t. the feature map, weight and bias.
    pub fn backward(&self, cache: &HeadCache<E>) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let b = cache.pooled.shape()[0];
        let c = self.features();
        let classes = self.classes();
        let (h, w) = cache.feature_hw;
        let plane = h * w;
        let mut d_weight: Tensor<E> = Tensor::zeros(&[classes, c]);
        let mut d_bias: Tensor<E> = Tensor::zeros(&[classes]);
        let mut d_features: Tensor<E> = Tensor::zeros(&[b, c, h, w]);
        let inv_plane = E::from_f64(1.0 / plane as f64);
        for img in 0..b {
            let drow = &cache.d_logits.data()[img * classes..(img + 1) * classes];
            let p = &cache.pooled.data()[img * c..(img + 1) * c];
            for cls in 0..classes {
                let dl = drow[cls];
                d_bias.data_mut()[cls] += dl;
                let wgrad = d_weight.data_mut();
                for i in 0..c {
                    wgrad[cls * c + i] = wgrad[cls * c + i].madd(dl, p[i]);
                }
            }
            for ch in 0..c {
                let mut dpool = E::ZERO;
                for cls in 0..classes {
                    dpool = dpool.madd(drow[cls], self.weight.data()[cls * c + ch]);
                }
                let dv = dpool * inv_plane;
                let base = (img * c + ch) * plane;
                for slot in &mut d_features.data_mut()[base..base + plane] {
                    *slot = dv;
                }
            }
        }
        Ok((d_features, d_weight, d_bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        // Zero weights and bias: every class equally likely.
        let head = HeadParams {
            weight: Tensor::<f64>::zeros(&[10, 4]),
            bias: Tensor::zeros(&[10]),
        };
        let x = Tensor::full(&[3, 4, 2, 2], 0.7);
        let (loss, _, _) = head.loss(&x, &[1, 5, 9]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn dominant_logit_wins() {
        // Weight row for class 2 strongly positive on constant-positive input.
        let mut weight = Tensor::<f64>::zeros(&[10, 2]);
        weight.data_mut()[2 * 2] = 5.0;
        weight.data_mut()[2 * 2 + 1] = 5.0;
        let head = HeadParams {
            weight,
            bias: Tensor::zeros(&[10]),
        };
        let x = Tensor::full(&[2, 2, 3, 3], 1.0);
        let (loss, acc, _) = head.loss(&x, &[2, 2]).unwrap();
        assert!(loss < 10.0f64.ln());
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn label_out_of_range_is_a_data_error() {
        let head = HeadParams {
            weight: Tensor::<f64>::zeros(&[4, 2]),
            bias: Tensor::zeros(&[4]),
        };
        let x = Tensor::full(&[1, 2, 2, 2], 0.0);
        assert!(matches!(head.loss(&x, &[4]), Err(Error::Data(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(51);
        let head = HeadParams::<f64>::new_he(5, 3, &mut rng).unwrap();
        let x = Tensor::alloc(
            &[4, 3, 2, 2],
            Fill::Normal {
                mean: 0.1,
                stddev: 1.0,
                rng: &mut rng,
            },
        )
        .unwrap();
        let labels = [0u8, 3, 1, 4];
        let (_, _, cache) = head.loss(&x, &labels).unwrap();
        let (dx, dw, db) = head.backward(&cache).unwrap();
        let h = 1e-5;
        let loss_of = |head: &HeadParams<f64>, x: &Tensor<f64>| -> f64 {
            head.loss(x, &labels).unwrap().0
        };
        for idx in [0usize, 10, 25, 47] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss_of(&head, &xp) - loss_of(&head, &xm)) / (2.0 * h);
            assert!(
                (fd - dx.data()[idx]).abs() / fd.abs().max(1.0) < 1e-6,
                "feature grad {idx}"
            );
        }
        for idx in [0usize, 7, 14] {
            let mut hp = head.clone();
            hp.weight.data_mut()[idx] += h;
            let mut hm = head.clone();
            hm.weight.data_mut()[idx] -= h;
            let fd = (loss_of(&hp, &x) - loss_of(&hm, &x)) / (2.0 * h);
            assert!(
                (fd - dw.data()[idx]).abs() / fd.abs().max(1.0) < 1e-6,
                "weight grad {idx}"
            );
        }
        for idx in 0..5 {
            let mut hp = head.clone();
            hp.bias.data_mut()[idx] += h;
            let mut hm = head.clone();
            hm.bias.data_mut()[idx] -= h;
            let fd = (loss_of(&hp, &x) - loss_of(&hm, &x)) / (2.0 * h);
            assert!(
                (fd - db.data()[idx]).abs() / fd.abs().max(1.0) < 1e-6,
                "bias grad {idx}"
            );
        }
    }
}
