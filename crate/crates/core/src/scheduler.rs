//! Noise schedules, forward noising, and the deterministic DDIM step with its
//! algebraic inverse.
//!
//! The β table is linear 1e-4 → 2e-2 over the training horizon (the classic
//! DDPM choice) and the stochasticity is fixed to η = 0 everywhere: the whole
//! pipeline relies on the reverse process being a deterministic, invertible
//! map for a fixed noise prediction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Training-time β/ᾱ tables plus the DDIM step subsequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Training step count T.
    pub t_train: usize,
    /// β_t for t = 1..=T (index 0 unused).
    beta: Vec<f64>,
    /// ᾱ_t for t = 0..=T with ᾱ_0 = 1.
    alpha_bar: Vec<f64>,
    /// Strictly increasing sampling subsequence of 1..=T, ending at T.
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Trace boundaries: `[0, s_1, ..., s_n]` with s_n = T.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b = Vec::with_capacity(self.ddim_steps.len() + 1);
        b.push(0);
        b.extend_from_slice(&self.ddim_steps);
        b
    }

    pub fn is_boundary(&self, t: usize) -> bool {
        t == 0 || self.ddim_steps.binary_search(&t).is_ok()
    }

    fn check_train_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_train {
            return Err(Error::Range(format!(
                "step {t} outside training range 1..={}",
                self.t_train
            )));
        }
        Ok(())
    }

    fn check_transport_pair(&self, hi: usize, lo: usize) -> Result<()> {
        if hi <= lo {
            return Err(Error::Range(format!("expected step {hi} > {lo}")));
        }
        if !self.is_boundary(hi) || !self.is_boundary(lo) {
            return Err(Error::Range(format!(
                "steps ({hi}, {lo}) must both be schedule members"
            )));
        }
        Ok(())
    }
}

/// Build a schedule: linear β over `t_train` steps and `ddim_count` uniformly
/// spaced sampling steps ending at `t_train`.
pub fn make_schedule(t_train: usize, ddim_count: usize) -> Result<NoiseSchedule> {
    if t_train < 1 {
        return Err(Error::Config("t_train must be at least 1".into()));
    }
    if ddim_count < 1 || ddim_count > t_train {
        return Err(Error::Config(format!(
            "ddim_count {ddim_count} must be in 1..={t_train}"
        )));
    }
    let mut beta = vec![0.0; t_train + 1];
    let mut alpha_bar = vec![1.0; t_train + 1];
    for t in 1..=t_train {
        let frac = if t_train == 1 { 0.0 } else { (t - 1) as f64 / (t_train - 1) as f64 };
        beta[t] = BETA_START + (BETA_END - BETA_START) * frac;
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }
    let mut ddim_steps = Vec::with_capacity(ddim_count);
    for k in 1..=ddim_count {
        let s = ((k as f64) * (t_train as f64) / (ddim_count as f64)).round() as usize;
        ddim_steps.push(s.max(1));
    }
    for w in ddim_steps.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "ddim steps not strictly increasing: {:?}",
                ddim_steps
            )));
        }
    }
    debug_assert_eq!(*ddim_steps.last().unwrap(), t_train);
    Ok(NoiseSchedule { t_train, beta, alpha_bar, ddim_steps })
}

// ── Coefficient-level algebra ────────────────────────────────────────
//
// The step-indexed operations below are thin wrappers over these; tests can
// exercise exact ᾱ values directly.

/// `√ᾱ·z0 + √(1−ᾱ)·noise`.
pub fn add_noise_alpha<T: Real>(z0: &Tensor<T>, noise: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if z0.shape() != noise.shape() {
        return Err(Error::Dimension("add_noise shape mismatch".into()));
    }
    let a = T::from_f64(alpha_bar.sqrt());
    let b = T::from_f64((1.0 - alpha_bar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&z, &n)| a * z + b * n)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// `(z − √(1−ᾱ)·eps) / √ᾱ`, the ε-prediction estimate of the clean sample.
pub fn predict_x0_alpha<T: Real>(zt: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if zt.shape() != eps.shape() {
        return Err(Error::Dimension("predict_x0 shape mismatch".into()));
    }
    let c = T::from_f64((1.0 - alpha_bar).sqrt());
    let inv = T::from_f64(1.0 / alpha_bar.sqrt());
    let data = zt
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (z - c * e) * inv)
        .collect();
    Tensor::new(zt.shape().to_vec(), data)
}

/// Deterministic DDIM transport between two noise levels for a fixed eps:
/// `√ᾱ_to · x̂0(z, eps, ᾱ_from) + √(1−ᾱ_to) · eps`.
///
/// With `ᾱ_to < ᾱ_from` this is a denoising step; with `ᾱ_to > ᾱ_from` it is
/// the exact algebraic inverse. Same coefficients, same rounding, both ways.
pub fn ddim_transport<T: Real>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    alpha_bar_from: f64,
    alpha_bar_to: f64,
) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(Error::Dimension("ddim transport shape mismatch".into()));
    }
    let c_from = T::from_f64((1.0 - alpha_bar_from).sqrt());
    let inv_from = T::from_f64(1.0 / alpha_bar_from.sqrt());
    let c_to_sig = T::from_f64(alpha_bar_to.sqrt());
    let c_to_eps = T::from_f64((1.0 - alpha_bar_to).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &ev)| {
            let x0 = (zv - c_from * ev) * inv_from;
            c_to_sig * x0 + c_to_eps * ev
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Coefficients of the taped version of [`ddim_transport`]; the tuning loss
/// graph replays exactly this arithmetic.
pub(crate) fn transport_coeffs(alpha_bar_from: f64, alpha_bar_to: f64) -> (f64, f64, f64, f64) {
    (
        (1.0 - alpha_bar_from).sqrt(),
        1.0 / alpha_bar_from.sqrt(),
        alpha_bar_to.sqrt(),
        (1.0 - alpha_bar_to).sqrt(),
    )
}

// ── Step-indexed operations ──────────────────────────────────────────

/// Forward noising to training step `t`.
pub fn add_noise<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_train_step(t)?;
    add_noise_alpha(z0, noise, s.alpha_bar(t))
}

pub fn predict_x0<T: Real>(
    zt: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_train_step(t)?;
    predict_x0_alpha(zt, eps, s.alpha_bar(t))
}

/// One deterministic (η = 0) DDIM update from `t` down to `t_prev`
/// (`t_prev = 0` means fully denoised).
pub fn ddim_step<T: Real>(
    zt: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_transport_pair(t, t_prev)?;
    ddim_transport(zt, eps, s.alpha_bar(t), s.alpha_bar(t_prev))
}

/// Exact algebraic inverse of [`ddim_step`] for the same `eps`: recovers `zt`
/// from `z_{t_prev}`.
pub fn ddim_invert_step<T: Real>(
    zprev: &Tensor<T>,
    eps: &Tensor<T>,
    t_prev: usize,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_transport_pair(t, t_prev)?;
    ddim_transport(zprev, eps, s.alpha_bar(t_prev), s.alpha_bar(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn default_schedule_shape() {
        let s = make_schedule(1000, 50).unwrap();
        assert_eq!(s.ddim_steps().len(), 50);
        assert_eq!(*s.ddim_steps().last().unwrap(), 1000);
        assert_eq!(s.ddim_steps()[0], 20);
        assert_eq!(s.boundaries().len(), 51);
    }

    #[test]
    fn full_subsequence_when_counts_match() {
        let s = make_schedule(16, 16).unwrap();
        let expect: Vec<usize> = (1..=16).collect();
        assert_eq!(s.ddim_steps(), expect.as_slice());
    }

    #[test]
    fn alpha_bar_matches_cumulative_product_oracle() {
        let s = make_schedule(1000, 50).unwrap();
        // Independent oracle: fold the betas directly.
        let mut acc = 1.0f64;
        for t in 1..=1000usize {
            let beta = BETA_START + (BETA_END - BETA_START) * ((t - 1) as f64) / 999.0;
            acc *= 1.0 - beta;
        }
        assert!(close(s.alpha_bar(1000), acc, 1e-15));
        assert!(s.alpha_bar(1000) < 1e-3);
        // Strictly decreasing, starting at exactly 1.
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_counts_are_config_errors() {
        assert!(make_schedule(0, 1).is_err());
        assert!(make_schedule(10, 0).is_err());
        assert!(make_schedule(10, 11).is_err());
    }

    #[test]
    fn add_noise_zero_noise_scales_input() {
        let s = make_schedule(100, 10).unwrap();
        let z0 = Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let zero = Tensor::zeros(vec![2]);
        let out = add_noise(&z0, 50, &zero, &s).unwrap();
        let a = s.alpha_bar(50).sqrt();
        assert!(close(out.data()[0], a, 1e-15));
        assert!(close(out.data()[1], -2.0 * a, 1e-15));
    }

    #[test]
    fn add_noise_near_identity_at_t1() {
        let s = make_schedule(1000, 50).unwrap();
        let z0 = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let n = Tensor::new(vec![1], vec![1.0]).unwrap();
        let out = add_noise(&z0, 1, &n, &s).unwrap();
        // ᾱ_1 = 1 − β_1, so the output sits within √β_1 of z0.
        assert!((out.data()[0] - 1.0).abs() <= s.beta(1).sqrt() + 1e-12);
    }

    #[test]
    fn add_noise_scalar_oracle() {
        // ᾱ = 0.25, z0 = 2, noise = 1 → 0.5·2 + √0.75·1
        let z0 = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let n = Tensor::new(vec![1], vec![1.0]).unwrap();
        let out = add_noise_alpha(&z0, &n, 0.25).unwrap();
        assert!(close(out.data()[0], 1.8660254037844386, 1e-7));
    }

    #[test]
    fn add_noise_range_error() {
        let s = make_schedule(10, 5).unwrap();
        let z = Tensor::<f32>::zeros(vec![1]);
        assert!(matches!(add_noise(&z, 0, &z, &s), Err(Error::Range(_))));
        assert!(matches!(add_noise(&z, 11, &z, &s), Err(Error::Range(_))));
    }

    #[test]
    fn predict_x0_zero_eps() {
        let s = make_schedule(100, 10).unwrap();
        let zt = Tensor::<f64>::new(vec![1], vec![3.0]).unwrap();
        let zero = Tensor::zeros(vec![1]);
        let out = predict_x0(&zt, &zero, 70, &s).unwrap();
        assert!(close(out.data()[0], 3.0 / s.alpha_bar(70).sqrt(), 1e-12));
    }

    #[test]
    fn predict_x0_scalar_oracle() {
        // ᾱ = 0.25, zt = 1, eps = 0.5 → (1 − √0.75·0.5)/0.5
        let zt = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let eps = Tensor::new(vec![1], vec![0.5]).unwrap();
        let out = predict_x0_alpha(&zt, &eps, 0.25).unwrap();
        assert!(close(out.data()[0], 1.1339745962155614, 1e-7));
    }

    #[test]
    fn predict_x0_inverts_add_noise() {
        // The round-trip is exact algebra, but the 1/√ᾱ_t factor amplifies
        // rounding of (z_t − √(1−ᾱ_t)·n); in f32 the 1e-5 bound holds where
        // ᾱ_t ≥ 1e-2, and f64 covers the whole range.
        let s = make_schedule(1000, 50).unwrap();
        let z0 = Tensor::<f32>::new(vec![3], vec![0.4, -0.9, 0.02]).unwrap();
        let n = Tensor::new(vec![3], vec![1.3, -0.1, 0.7]).unwrap();
        for &t in &[1usize, 17, 300, 640] {
            assert!(s.alpha_bar(t) >= 1e-2);
            let zt = add_noise(&z0, t, &n, &s).unwrap();
            let back = predict_x0(&zt, &n, t, &s).unwrap();
            assert!(back.max_rel_diff(&z0) <= 1e-5, "t={t}");
        }
        let z0 = z0.cast::<f64>();
        let n = n.cast::<f64>();
        for &t in &[1usize, 17, 500, 1000] {
            let zt = add_noise(&z0, t, &n, &s).unwrap();
            let back = predict_x0(&zt, &n, t, &s).unwrap();
            assert!(back.max_rel_diff(&z0) <= 1e-9, "t={t}");
        }
    }

    #[test]
    fn ddim_step_noop_when_levels_equal() {
        let z = Tensor::<f64>::new(vec![2], vec![1.0, -0.3]).unwrap();
        let e = Tensor::new(vec![2], vec![0.2, 0.9]).unwrap();
        let out = ddim_transport(&z, &e, 0.37, 0.37).unwrap();
        assert!(out.max_rel_diff(&z) <= 1e-12);
    }

    #[test]
    fn ddim_step_terminal_equals_predict_x0() {
        let s = make_schedule(1000, 50).unwrap();
        let z = Tensor::<f64>::new(vec![2], vec![0.8, -1.1]).unwrap();
        let e = Tensor::new(vec![2], vec![0.1, -0.4]).unwrap();
        let t = s.ddim_steps()[0];
        let stepped = ddim_step(&z, &e, t, 0, &s).unwrap();
        let x0 = predict_x0(&z, &e, t, &s).unwrap();
        assert!(stepped.max_rel_diff(&x0) <= 1e-12);
    }

    #[test]
    fn ddim_step_scalar_oracle() {
        // ᾱ_t = 0.25, ᾱ_prev = 0.64, zt = 1, eps = 0.5
        // x0 = 1.1339746, out = 0.8·x0 + 0.6·0.5 = 1.2071797
        let z = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let e = Tensor::new(vec![1], vec![0.5]).unwrap();
        let out = ddim_transport(&z, &e, 0.25, 0.64).unwrap();
        assert!(close(out.data()[0], 1.2071796769724491, 1e-7));
    }

    #[test]
    fn ddim_invert_recovers_scalar_oracle() {
        let zprev = Tensor::<f64>::new(vec![1], vec![1.2071796769724491]).unwrap();
        let e = Tensor::new(vec![1], vec![0.5]).unwrap();
        let back = ddim_transport(&zprev, &e, 0.64, 0.25).unwrap();
        assert!(close(back.data()[0], 1.0, 1e-12));
    }

    #[test]
    fn invert_with_zero_eps_is_pure_rescale() {
        let s = make_schedule(1000, 50).unwrap();
        let (t_prev, t) = (s.ddim_steps()[3], s.ddim_steps()[4]);
        let z = Tensor::<f64>::new(vec![2], vec![0.3, -0.8]).unwrap();
        let zero = Tensor::zeros(vec![2]);
        let out = ddim_invert_step(&z, &zero, t_prev, t, &s).unwrap();
        let ratio = (s.alpha_bar(t) / s.alpha_bar(t_prev)).sqrt();
        assert!(close(out.data()[0], 0.3 * ratio, 1e-12));
        assert!(close(out.data()[1], -0.8 * ratio, 1e-12));
    }

    #[test]
    fn step_and_invert_are_mutually_inverse() {
        let s = make_schedule(1000, 50).unwrap();
        let z = Tensor::<f32>::new(vec![4], vec![0.5, -1.2, 2.0, 0.01]).unwrap();
        let e = Tensor::new(vec![4], vec![0.3, 0.3, -0.7, 1.5]).unwrap();
        let (t, t_prev) = (s.ddim_steps()[30], s.ddim_steps()[29]);
        let down = ddim_step(&z, &e, t, t_prev, &s).unwrap();
        let back = ddim_invert_step(&down, &e, t_prev, t, &s).unwrap();
        assert!(back.max_rel_diff(&z) <= 1e-5);
    }

    #[test]
    fn transport_requires_schedule_members() {
        let s = make_schedule(1000, 50).unwrap();
        let z = Tensor::<f32>::zeros(vec![1]);
        // 21 is not in the 50-step subsequence.
        assert!(matches!(ddim_step(&z, &z, 21, 0, &s), Err(Error::Range(_))));
        assert!(matches!(ddim_step(&z, &z, 20, 20, &s), Err(Error::Range(_))));
        // Non-adjacent members are fine.
        assert!(ddim_step(&z, &z, 1000, 20, &s).is_ok());
    }
}
