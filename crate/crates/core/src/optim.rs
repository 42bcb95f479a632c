//! Adam with bias correction, keyed by parameter name.

use crate::tensor::Real;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u32,
}

/// Adaptive-moment optimizer with (0.9, 0.999) decay.
pub struct Adam<T: Real> {
    lr: f64,
    states: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, states: BTreeMap::new() }
    }

    /// One update of `param` under `grad`. Moments are tracked per name.
    pub fn step(&mut self, name: &str, param: &mut [T], grad: &[T]) {
        debug_assert_eq!(param.len(), grad.len());
        let state = self.states.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::ZERO; param.len()],
            v: vec![T::ZERO; param.len()],
            step: 0,
        });
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one_minus_b1 = T::from_f64(1.0 - ADAM_BETA1);
        let one_minus_b2 = T::from_f64(1.0 - ADAM_BETA2);
        let corr1 = T::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(t)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(ADAM_EPS);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * (g * g);
            let m_hat = *m * corr1;
            let v_hat = *v * corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (p-3)^2; gradient 2(p-3)
        let mut adam = Adam::<f64>::new(0.1);
        let mut p = vec![0.0f64];
        for _ in 0..200 {
            let g = vec![2.0 * (p[0] - 3.0)];
            adam.step("p", &mut p, &g);
        }
        assert!((p[0] - 3.0).abs() < 0.05, "p = {}", p[0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction the first update is ≈ lr · sign(g).
        let mut adam = Adam::<f64>::new(0.01);
        let mut p = vec![1.0f64];
        adam.step("p", &mut p, &[5.0]);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
    }
}
