//! Batch normalization over the channel axis.
//!
//! Train mode normalizes with current-batch moments (biased variance) and
//! folds them into the running statistics with EMA decay; eval mode uses the
//! running statistics only. The per-channel scale gamma is the quantity the
//! growth mechanism zeroes to keep a fresh residual path silent.

use crate::error::{Error, Result};
use crate::tensor::{channel_moments, Element, Tensor};

const LANES: usize = 8;

/// Fused per-plane sums for the backward pass: (sum dy, sum dy * xhat,
/// sum (x - mean)), accumulated in fixed-lane partials.
fn bn_backward_sums<E: Element>(dy: &[E], x: &[E], mu: E, inv_std: E) -> (E, E, E) {
    let mut a_dy = [E::ZERO; LANES];
    let mut a_dyx = [E::ZERO; LANES];
    let mut a_xm = [E::ZERO; LANES];
    let n = dy.len();
    let mut i = 0usize;
    while i + LANES <= n {
        for j in 0..LANES {
            let d = dy[i + j];
            let xm = x[i + j] - mu;
            a_dy[j] += d;
            a_dyx[j] = a_dyx[j].madd(d, xm * inv_std);
            a_xm[j] += xm;
        }
        i += LANES;
    }
    let (mut s_dy, mut s_dyx, mut s_xm) = (E::ZERO, E::ZERO, E::ZERO);
    while i < n {
        let d = dy[i];
        let xm = x[i] - mu;
        s_dy += d;
        s_dyx = s_dyx.madd(d, xm * inv_std);
        s_xm += xm;
        i += 1;
    }
    for j in 0..LANES {
        s_dy += a_dy[j];
        s_dyx += a_dyx[j];
        s_xm += a_xm[j];
    }
    (s_dy, s_dyx, s_xm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub epsilon: f64,
    pub ema_decay: f64,
}

/// Per-channel batch moments cached for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<E: Element> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

impl<E: Element> BnParams<E> {
    /// Standard init: gamma 1, beta 0, running stats at mean 0 / var 1.
    pub fn new(channels: usize, epsilon: f64, ema_decay: f64) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon,
            ema_decay,
        }
    }

    /// Same as [`BnParams::new`] but with gamma zeroed, so the layer emits
    /// an all-zero tensor no matter its input.
    pub fn new_zero_gamma(channels: usize, epsilon: f64, ema_decay: f64) -> Self {
        let mut p = Self::new(channels, epsilon, ema_decay);
        p.gamma = Tensor::zeros(&[channels]);
        p
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
        let dims = input.dims4()?;
        if dims.1 != self.channels() {
            return Err(Error::shape(format!(
                "input has {} channels, batch norm expects {}",
                dims.1,
                self.channels()
            )));
        }
        Ok(dims)
    }

    /// Train-mode forward: normalize with batch moments, update running
    /// statistics in place, and return the cache the backward pass needs.
    pub fn forward_train(&mut self, input: &Tensor<E>) -> Result<(Tensor<E>, BnCache<E>)> {
        let (b, c, h, w) = self.check_input(input)?;
        let (mean, var) = channel_moments(input)?;
        let eps = E::from_f64(self.epsilon);
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(input.shape());
        let plane = h * w;
        for img in 0..b {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let (g, bt, mu, is) = (
                    self.gamma.data()[ch],
                    self.beta.data()[ch],
                    mean[ch],
                    inv_std[ch],
                );
                let src = &input.data()[base..base + plane];
                let dst = &mut out.data_mut()[base..base + plane];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = bt.madd(g, (x - mu) * is);
                }
            }
        }
        let d = E::from_f64(self.ema_decay);
        let omd = E::from_f64(1.0 - self.ema_decay);
        for ch in 0..c {
            let rm = self.running_mean.data_mut();
            rm[ch] = rm[ch] * d + omd * mean[ch];
            let rv = self.running_var.data_mut();
            rv[ch] = rv[ch] * d + omd * var[ch];
        }
        Ok((out, BnCache { mean, inv_std }))
    }

    /// Eval-mode forward: normalize with running statistics.
    pub fn forward_eval(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, c, h, w) = self.check_input(input)?;
        let eps = E::from_f64(self.epsilon);
        let mut out = Tensor::zeros(input.shape());
        let plane = h * w;
        for img in 0..b {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let mu = self.running_mean.data()[ch];
                let is = E::ONE / (self.running_var.data()[ch] + eps).sqrt();
                let g = self.gamma.data()[ch];
                let bt = self.beta.data()[ch];
                let src = &input.data()[base..base + plane];
                let dst = &mut out.data_mut()[base..base + plane];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = bt.madd(g, (x - mu) * is);
                }
            }
        }
        Ok(out)
    }

    /// Train-mode backward, including the batch-moment terms.
    ///
    /// Returns (input grad, gamma grad, beta grad).
    pub fn backward(
        &self,
        input: &Tensor<E>,
        cache: &BnCache<E>,
        upstream: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let (b, c, h, w) = self.check_input(input)?;
        if !upstream.same_shape(input) {
            return Err(Error::shape("upstream shape mismatch in batch norm backward"));
        }
        let plane = h * w;
        let count = E::from_f64((b * plane) as f64);
        let mut d_input = Tensor::zeros(input.shape());
        let mut d_gamma = Tensor::zeros(&[c]);
        let mut d_beta = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mu = cache.mean[ch];
            let is = cache.inv_std[ch];
            let g = self.gamma.data()[ch];
            // First pass: sum dy, sum dy * xhat, sum (x - mean).
            let (mut s_dy, mut s_dyx, mut s_xm) = (E::ZERO, E::ZERO, E::ZERO);
            for img in 0..b {
                let base = (img * c + ch) * plane;
                let dy = &upstream.data()[base..base + plane];
                let x = &input.data()[base..base + plane];
                let (p_dy, p_dyx, p_xm) = bn_backward_sums(dy, x, mu, is);
                s_dy += p_dy;
                s_dyx += p_dyx;
                s_xm += p_xm;
            }
            d_beta.data_mut()[ch] = s_dy;
            d_gamma.data_mut()[ch] = s_dyx;
            // d var = -1/2 * gamma * inv_std^2 * sum(dy * xhat)
            let two = E::from_f64(2.0);
            let half = E::from_f64(0.5);
            let d_var = -half * g * is * is * s_dyx;
            // d mean = -gamma * inv_std * sum(dy) + d_var * (-2/N) * sum(x - mean)
            let d_mean = -g * is * s_dy - d_var * two * s_xm / count;
            for img in 0..b {
                let base = (img * c + ch) * plane;
                let dy = &upstream.data()[base..base + plane];
                let x = &input.data()[base..base + plane];
                let dst = &mut d_input.data_mut()[base..base + plane];
                for i in 0..plane {
                    let xm = x[i] - mu;
                    dst[i] = g * is * dy[i] + d_var * two * xm / count + d_mean / count;
                }
            }
        }
        Ok((d_input, d_gamma, d_beta))
    }
}
