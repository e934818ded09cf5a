//! SGD with momentum and weight decay, the two-phase learning-rate
//! schedule, and EMA shadowing of trainable parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{forward::GradientMap, ParamKey, SeriesNetwork};
use crate::tensor::{Element, Tensor};

/// Momentum SGD state.
///
/// Update convention, fixed and tested: per key,
/// `g' = g + weight_decay * w`; `v <- momentum * v + g'`; `w <- w - lr * v`.
/// Weight decay applies to every trainable tensor (conv weights, gamma,
/// beta, head).
#[derive(Debug, Clone)]
pub struct SgdState<E: Element> {
    velocity: BTreeMap<ParamKey, Tensor<E>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl<E: Element> SgdState<E> {
    pub fn new(net: &SeriesNetwork<E>, momentum: f64, weight_decay: f64, lr: f64) -> Self {
        let mut state = SgdState {
            velocity: BTreeMap::new(),
            momentum,
            weight_decay,
            lr,
        };
        state.ensure_keys(net);
        state
    }

    /// Add zero velocity for parameters that appeared via growth.
    pub fn ensure_keys(&mut self, net: &SeriesNetwork<E>) {
        for key in net.trainable_keys() {
            let shape = net.param(&key).expect("listed key").shape().to_vec();
            self.velocity
                .entry(key)
                .or_insert_with(|| Tensor::zeros(&shape));
        }
    }

    /// One optimizer step over every trainable parameter.
    pub fn step(&mut self, net: &mut SeriesNetwork<E>, grads: &GradientMap<E>) -> Result<()> {
        let keys = net.trainable_keys();
        if grads.len() != keys.len() || keys.iter().any(|k| !grads.contains_key(k)) {
            return Err(Error::consistency(format!(
                "gradient keys ({}) do not match trainable keys ({})",
                grads.len(),
                keys.len()
            )));
        }
        if self.velocity.len() != keys.len() || keys.iter().any(|k| !self.velocity.contains_key(k))
        {
            return Err(Error::consistency(
                "velocity keys do not match trainable keys; call ensure_keys after growth",
            ));
        }
        let momentum = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        let lr = E::from_f64(self.lr);
        for key in &keys {
            let grad = &grads[key];
            let vel = self.velocity.get_mut(key).expect("checked above");
            let param = net.param_mut(key).expect("listed key");
            if grad.shape() != param.shape() {
                return Err(Error::consistency(format!(
                    "gradient shape mismatch for {key}"
                )));
            }
            let p = param.data_mut();
            let v = vel.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                let adjusted = g[i].madd(wd, p[i]);
                if !adjusted.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite gradient for {key} at element {i}"
                    )));
                }
                v[i] = adjusted.madd(momentum, v[i]);
                p[i] = p[i] - lr * v[i];
            }
        }
        Ok(())
    }
}

/// Exponential-moving-average shadows of the trainable parameters.
///
/// Batch-norm running statistics are already EMAs and get no extra shadow.
#[derive(Debug, Clone)]
pub struct EmaState<E: Element> {
    pub decay: f64,
    shadows: BTreeMap<ParamKey, Tensor<E>>,
    swapped: bool,
}

impl<E: Element> EmaState<E> {
    /// Shadows start equal to the current parameter values.
    pub fn new(net: &SeriesNetwork<E>, decay: f64) -> Self {
        let mut ema = EmaState {
            decay,
            shadows: BTreeMap::new(),
            swapped: false,
        };
        ema.ensure_keys(net);
        ema
    }

    /// Initialize shadows for keys added by growth to the current values.
    pub fn ensure_keys(&mut self, net: &SeriesNetwork<E>) {
        for key in net.trainable_keys() {
            if !self.shadows.contains_key(&key) {
                self.shadows
                    .insert(key, net.param(&key).expect("listed key").clone());
            }
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * param` per key.
    pub fn update(&mut self, net: &SeriesNetwork<E>) -> Result<()> {
        if self.swapped {
            return Err(Error::consistency("ema update while shadows are swapped in"));
        }
        let d = E::from_f64(self.decay);
        let omd = E::from_f64(1.0 - self.decay);
        for (key, shadow) in self.shadows.iter_mut() {
            let param = net
                .param(key)
                .ok_or_else(|| Error::consistency(format!("ema key {key} missing from net")))?;
            for (s, &p) in shadow.data_mut().iter_mut().zip(param.data()) {
                *s = *s * d + omd * p;
            }
        }
        Ok(())
    }

    /// Exchange live parameters and shadows (exact, bitwise).
    pub fn swap_in(&mut self, net: &mut SeriesNetwork<E>) -> Result<()> {
        if self.swapped {
            return Err(Error::consistency("ema shadows already swapped in"));
        }
        self.swap(net)?;
        self.swapped = true;
        Ok(())
    }

    /// Restore live parameters after [`EmaState::swap_in`].
    pub fn swap_out(&mut self, net: &mut SeriesNetwork<E>) -> Result<()> {
        if !self.swapped {
            return Err(Error::consistency("ema shadows are not swapped in"));
        }
        self.swap(net)?;
        self.swapped = false;
        Ok(())
    }

    fn swap(&mut self, net: &mut SeriesNetwork<E>) -> Result<()> {
        for (key, shadow) in self.shadows.iter_mut() {
            let param = net
                .param_mut(key)
                .ok_or_else(|| Error::consistency(format!("ema key {key} missing from net")))?;
            std::mem::swap(param, shadow);
        }
        Ok(())
    }

    pub fn shadows(&self) -> &BTreeMap<ParamKey, Tensor<E>> {
        &self.shadows
    }

    pub fn from_shadows(decay: f64, shadows: BTreeMap<ParamKey, Tensor<E>>) -> Self {
        EmaState {
            decay,
            shadows,
            swapped: false,
        }
    }
}

/// Which schedule drives the decay phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Decay phase split into equal rungs, one halving per rung.
    FixedStep,
    /// Halve when windowed mean training loss stops improving.
    Stagnation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePhase {
    /// Growth stages: the learning rate is pinned to the base value.
    Growing,
    /// Final-network training: halvings allowed.
    Final,
}

/// Two-phase learning-rate policy.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub halve_factor: f64,
    pub window: u64,
    pub epsilon: f64,
    pub max_halvings: u32,
    phase: SchedulePhase,
    halvings: u32,
    window_sum: f64,
    window_count: u64,
    prev_window_mean: Option<f64>,
}

impl LrSchedule {
    pub fn new(
        kind: ScheduleKind,
        base_lr: f64,
        window: u64,
        epsilon: f64,
        max_halvings: u32,
    ) -> Self {
        LrSchedule {
            kind,
            base_lr,
            halve_factor: 0.5,
            window,
            epsilon,
            max_halvings,
            phase: SchedulePhase::Growing,
            halvings: 0,
            window_sum: 0.0,
            window_count: 0,
            prev_window_mean: None,
        }
    }

    pub fn phase(&self) -> SchedulePhase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: SchedulePhase) {
        self.phase = phase;
        self.window_sum = 0.0;
        self.window_count = 0;
        self.prev_window_mean = None;
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    /// Current learning rate: `base * 0.5^halvings` (base while growing).
    pub fn lr(&self) -> f64 {
        match self.phase {
            SchedulePhase::Growing => self.base_lr,
            SchedulePhase::Final => self.base_lr * self.halve_factor.powi(self.halvings as i32),
        }
    }

    /// Force one halving (fixed-step rung boundaries). Returns the new lr,
    /// or None when the ladder is exhausted.
    pub fn halve(&mut self) -> Option<f64> {
        if self.halvings >= self.max_halvings {
            return None;
        }
        self.halvings += 1;
        Some(self.lr())
    }

    /// Record one training-step loss; under the stagnation policy this may
    /// trigger a halving once per completed window. Returns the new lr when
    /// one happens.
    pub fn record_loss(&mut self, loss: f64) -> Option<f64> {
        if self.phase != SchedulePhase::Final || self.kind != ScheduleKind::Stagnation {
            return None;
        }
        self.window_sum += loss;
        self.window_count += 1;
        if self.window_count < self.window {
            return None;
        }
        let mean = self.window_sum / self.window_count as f64;
        self.window_sum = 0.0;
        self.window_count = 0;
        let halved = match self.prev_window_mean {
            Some(prev) => {
                let improvement = (prev - mean) / prev.abs().max(f64::MIN_POSITIVE);
                if improvement <= self.epsilon {
                    self.halve()
                } else {
                    None
                }
            }
            None => None,
        };
        self.prev_window_mean = Some(mean);
        halved
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{default_channel_plan, LayerPlan};
    use crate::rng::SeededRng;

    fn tiny_net() -> SeriesNetwork<f64> {
        let mut rng = SeededRng::new(1);
        let plan = [LayerPlan {
            filters: 2,
            kernel: 3,
            stride: 1,
        }];
        SeriesNetwork::build_plain(1, &plan, 3, 0.9999, &mut rng).unwrap()
    }

    fn grads_like(net: &SeriesNetwork<f64>, value: f64) -> GradientMap<f64> {
        net.trainable_keys()
            .into_iter()
            .map(|k| {
                let shape = net.param(&k).unwrap().shape().to_vec();
                (k, Tensor::full(&shape, value))
            })
            .collect()
    }

    #[test]
    fn sgd_hand_values() {
        // w=1, g=0.5, v=0, lr=0.1, momentum 0.9, wd 0.0002:
        // g' = 0.5002, v = 0.5002, w = 0.94998
        let mut net = tiny_net();
        let key = ParamKey::HeadWeight;
        for v in net.param_mut(&key).unwrap().data_mut() {
            *v = 1.0;
        }
        let mut sgd = SgdState::new(&net, 0.9, 0.0002, 0.1);
        let mut grads = grads_like(&net, 0.0);
        for v in grads.get_mut(&key).unwrap().data_mut() {
            *v = 0.5;
        }
        // Zero all other parameters so their decay term stays zero.
        for k in net.trainable_keys() {
            if k != key {
                for v in net.param_mut(&k).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        sgd.step(&mut net, &grads).unwrap();
        let w = net.param(&key).unwrap().data()[0];
        assert!((w - 0.94998).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn sgd_zero_gradient_fixed_point() {
        let mut net = tiny_net();
        let before = net.param(&ParamKey::HeadWeight).unwrap().clone();
        let mut sgd = SgdState::new(&net, 0.9, 0.0, 0.1);
        let grads = grads_like(&net, 0.0);
        sgd.step(&mut net, &grads).unwrap();
        assert!(net.param(&ParamKey::HeadWeight).unwrap().bit_eq(&before));
    }

    #[test]
    fn sgd_two_steps_velocity_accumulates() {
        // Constant g=1, wd=0, lr=0.1: drops 0.1 then 0.19.
        let mut net = tiny_net();
        let key = ParamKey::HeadBias;
        let start = net.param(&key).unwrap().data()[0];
        let mut sgd = SgdState::new(&net, 0.9, 0.0, 0.1);
        let grads = grads_like(&net, 1.0);
        sgd.step(&mut net, &grads).unwrap();
        let w1 = net.param(&key).unwrap().data()[0];
        assert!((start - w1 - 0.1).abs() < 1e-12);
        sgd.step(&mut net, &grads).unwrap();
        let w2 = net.param(&key).unwrap().data()[0];
        assert!((w1 - w2 - 0.19).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_key_mismatch() {
        let mut net = tiny_net();
        let mut sgd = SgdState::new(&net, 0.9, 0.0, 0.1);
        let mut grads = grads_like(&net, 0.0);
        grads.remove(&ParamKey::HeadBias);
        assert!(matches!(
            sgd.step(&mut net, &grads),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut net = tiny_net();
        let mut sgd = SgdState::new(&net, 0.9, 0.0, 0.1);
        let mut grads = grads_like(&net, 0.0);
        grads.get_mut(&ParamKey::HeadBias).unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(sgd.step(&mut net, &grads), Err(Error::Numeric(_))));
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // f(w) = 0.5 * (2 w0^2 + w1^2), gradient (2 w0, w1).
        let mut w = [1.5f64, -2.0];
        let mut v = [0.0f64, 0.0];
        let (lr, momentum) = (0.1, 0.9);
        let mut loss = f64::INFINITY;
        for _ in 0..10_000 {
            let g = [2.0 * w[0], w[1]];
            for i in 0..2 {
                v[i] = momentum * v[i] + g[i];
                w[i] -= lr * v[i];
            }
            loss = 0.5 * (2.0 * w[0] * w[0] + w[1] * w[1]);
            if loss < 1e-6 {
                break;
            }
        }
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn ema_hand_value() {
        let mut net = tiny_net();
        let key = ParamKey::HeadBias;
        net.param_mut(&key).unwrap().data_mut()[0] = 0.0;
        let mut ema = EmaState::new(&net, 0.9999);
        net.param_mut(&key).unwrap().data_mut()[0] = 1.0;
        ema.update(&net).unwrap();
        let s = ema.shadows()[&key].data()[0];
        assert!((s - 0.0001).abs() < 1e-15, "shadow {s}");
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut net = tiny_net();
        let key = ParamKey::HeadBias;
        net.param_mut(&key).unwrap().data_mut()[0] = 0.0;
        let mut ema = EmaState::new(&net, 0.99);
        net.param_mut(&key).unwrap().data_mut()[0] = 1.0;
        let mut prev_gap = 1.0f64;
        for _ in 0..5 {
            ema.update(&net).unwrap();
            let gap = 1.0 - ema.shadows()[&key].data()[0];
            assert!((gap / prev_gap - 0.99).abs() < 1e-9);
            prev_gap = gap;
        }
    }

    #[test]
    fn ema_matches_scalar_unroll() {
        let mut net = tiny_net();
        let key = ParamKey::HeadBias;
        let decay = 0.9999;
        let mut ema = EmaState::new(&net, decay);
        let mut reference = net.param(&key).unwrap().data()[0];
        let mut rng = SeededRng::new(77);
        for _ in 0..50 {
            let p = rng.normal_f64();
            net.param_mut(&key).unwrap().data_mut()[0] = p;
            ema.update(&net).unwrap();
            reference = reference * decay + (1.0 - decay) * p;
        }
        assert!((ema.shadows()[&key].data()[0] - reference).abs() < 1e-12);
    }

    #[test]
    fn ema_swap_is_involution() {
        let mut rng = SeededRng::new(5);
        let mut net = SeriesNetwork::<f32>::build_plain(
            3,
            &default_channel_plan()[..2],
            10,
            0.9999,
            &mut rng,
        )
        .unwrap();
        let snapshot = net.clone();
        let mut ema = EmaState::new(&net, 0.9999);
        // Drift shadows away from the live values.
        for key in net.trainable_keys() {
            for v in net.param_mut(&key).unwrap().data_mut() {
                *v += 0.25;
            }
        }
        ema.update(&net).unwrap();
        let live: Vec<Tensor<f32>> = net
            .trainable_keys()
            .iter()
            .map(|k| net.param(k).unwrap().clone())
            .collect();
        ema.swap_in(&mut net).unwrap();
        ema.swap_out(&mut net).unwrap();
        for (key, expect) in net.trainable_keys().iter().zip(&live) {
            assert!(net.param(key).unwrap().bit_eq(expect), "key {key}");
        }
        drop(snapshot);
    }

    #[test]
    fn schedule_growing_phase_is_fixed() {
        let mut s = LrSchedule::new(ScheduleKind::Stagnation, 0.1, 10, 0.001, 4);
        for _ in 0..100 {
            assert_eq!(s.lr(), 0.1);
            assert!(s.record_loss(1.0).is_none());
        }
    }

    #[test]
    fn schedule_improving_windows_keep_lr() {
        let mut s = LrSchedule::new(ScheduleKind::Stagnation, 0.1, 10, 0.001, 4);
        s.set_phase(SchedulePhase::Final);
        let mut loss = 10.0;
        for _ in 0..100 {
            assert!(s.record_loss(loss).is_none());
            loss *= 0.95;
        }
        assert_eq!(s.lr(), 0.1);
    }

    #[test]
    fn schedule_stagnant_windows_halve() {
        let mut s = LrSchedule::new(ScheduleKind::Stagnation, 0.1, 10, 0.001, 4);
        s.set_phase(SchedulePhase::Final);
        let mut changed = Vec::new();
        for _ in 0..20 {
            if let Some(lr) = s.record_loss(1.0) {
                changed.push(lr);
            }
        }
        // Two equal windows: exactly one halving, 0.1 -> 0.05.
        assert_eq!(changed, vec![0.05]);
    }

    #[test]
    fn schedule_ladder_is_powers_of_half() {
        let mut s = LrSchedule::new(ScheduleKind::FixedStep, 0.1, 10, 0.001, 4);
        s.set_phase(SchedulePhase::Final);
        let mut ladder = vec![s.lr()];
        while let Some(lr) = s.halve() {
            ladder.push(lr);
        }
        let expect = [0.1, 0.05, 0.025, 0.0125, 0.00625];
        assert_eq!(ladder.len(), expect.len());
        for (a, b) in ladder.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(s.halve().is_none());
    }
}
