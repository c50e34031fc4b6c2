//! Diffusion variance schedule and the forward (noising) process.
//!
//! Time indices are 1-based (`t` in `1..=T`) to match the usual diffusion
//! convention, with `alpha_bar(0) == 1` so the posterior variance at `t = 1`
//! is zero and the last reverse step is deterministic.

use crate::error::{DmsmError, Result};
use crate::kspace::ComplexImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Variance schedule tables indexed by diffusion time `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma: Vec<f64>,
}

/// Parameters needed to rebuild a schedule (stored in checkpoints/configs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Linear 1e-4..0.02 over 1000 steps for full runs; desk-scale tests
        // override T and the endpoints in their run config.
        Self { t_steps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Linear beta interpolation plus the derived alpha tables.
pub fn build_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(DmsmError::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DmsmError::InvalidArgument(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let ScheduleKind::Linear = kind;
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    /// Derive all tables from raw betas.
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let t_steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        // beta_tilde(t) = (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta(t),
        // with alpha_bar(0) = 1 so beta_tilde(1) = 0.
        let mut beta_tilde = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
            beta_tilde.push((1.0 - prev) / (1.0 - alpha_bar[t]) * beta[t]);
        }
        let sigma = beta_tilde.iter().map(|b| b.sqrt()).collect();
        Self { t_steps, beta, alpha, alpha_bar, beta_tilde, sigma }
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.t_steps, "t {t} outside 1..={}", self.t_steps);
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[self.idx(t)]
    }

    /// Posterior standard deviation used by the reverse step; zero at t = 1.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.t_steps {
            Ok(())
        } else {
            Err(DmsmError::InvalidArgument(format!(
                "diffusion time {t} outside 1..={}",
                self.t_steps
            )))
        }
    }

    /// Forward noising: `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_noise(&self, x0: &ComplexImage, t: usize, eps: &ComplexImage) -> Result<ComplexImage> {
        self.check_t(t)?;
        if !x0.same_shape(eps) {
            return Err(DmsmError::ShapeMismatch(format!(
                "forward_noise: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        Ok(x0.scaled(ab.sqrt()).axpy((1.0 - ab).sqrt(), eps))
    }

    /// Invert the forward marginal: `(x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
    pub fn x0_from_eps(&self, x_t: &ComplexImage, t: usize, eps_hat: &ComplexImage) -> Result<ComplexImage> {
        self.check_t(t)?;
        if !x_t.same_shape(eps_hat) {
            return Err(DmsmError::ShapeMismatch(format!(
                "x0_from_eps: x_t {:?} vs eps_hat {:?}",
                x_t.shape(),
                eps_hat.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        if ab < 1e-12 {
            return Err(DmsmError::InvalidArgument(format!(
                "alpha_bar({t}) = {ab:.3e} is numerically singular"
            )));
        }
        Ok(x_t.axpy(-(1.0 - ab).sqrt(), eps_hat).scaled(1.0 / ab.sqrt()))
    }

    /// Coefficients of the marginal at `t` plus the reverse-step noise scale.
    /// The reverse mean itself comes from the backbone.
    pub fn posterior_step(&self, t: usize) -> Result<PosteriorStep> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok(PosteriorStep {
            sqrt_alpha_bar: ab.sqrt(),
            sqrt_one_minus_alpha_bar: (1.0 - ab).sqrt(),
            sigma: self.sigma(t),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorStep {
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub sigma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{NormalSource, StreamKind};
    use num_complex::Complex64;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut src = NormalSource::from_stream(seed, StreamKind::Data, 3);
        let data = (0..h * w).map(|_| Complex64::new(src.next(), src.next())).collect();
        ComplexImage::new(1, h, w, data).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.beta_tilde(1), 0.0);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn cumulative_product_oracle() {
        // Direct cumulative-product evaluation of alpha_bar.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]);
        let expect = [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7];
        for t in 1..=3 {
            assert!((s.alpha_bar(t) - expect[t - 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_tilde_hand_evaluation() {
        // beta_tilde(2) = (1 - 0.9) / (1 - 0.72) * 0.2.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]);
        let expect = 0.1 / 0.28 * 0.2;
        assert!((s.beta_tilde(2) - expect).abs() < 1e-15);
        assert!((s.sigma(2) - expect.sqrt()).abs() < 1e-15);
        assert!((s.sigma(2) - 0.26726124).abs() < 1e-7);
    }

    #[test]
    fn sigma_never_exceeds_beta() {
        let s = build_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        for t in 1..=100 {
            assert!(s.sigma(t) * s.sigma(t) <= s.beta(t) + 1e-15);
        }
    }

    #[test]
    fn alpha_bar_monotone_and_consistent() {
        let s = build_schedule(50, 2e-3, 0.35, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for t in 1..=50 {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_noise_zero_eps() {
        let s = build_schedule(10, 0.01, 0.1, ScheduleKind::Linear).unwrap();
        let x0 = random_image(8, 8, 1);
        let eps = ComplexImage::zeros(1, 8, 8);
        let xt = s.forward_noise(&x0, 4, &eps).unwrap();
        let expect = x0.scaled(s.alpha_bar(4).sqrt());
        assert!(xt.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn forward_noise_moment_oracle() {
        // Monte-Carlo: at a fixed pixel, mean -> sqrt(ab)*x0 and per-channel
        // variance -> 1 - ab, each within 3 standard errors.
        let s = build_schedule(10, 0.05, 0.3, ScheduleKind::Linear).unwrap();
        let t = 7;
        let ab = s.alpha_bar(t);
        let x0 = random_image(8, 8, 2);
        let n = 100_000;
        let mut src = NormalSource::from_stream(3, StreamKind::Data, 17);
        let (mut sum, mut sumsq) = (0.0, 0.0);
        let pixel = 20;
        for _ in 0..n {
            // Only the real channel of one pixel matters for the moments.
            let e = src.next();
            let v = ab.sqrt() * x0.coil(0)[pixel].re + (1.0 - ab).sqrt() * e;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (1.0 - ab).sqrt() / (n as f64).sqrt();
        assert!((mean - ab.sqrt() * x0.coil(0)[pixel].re).abs() < 3.0 * se_mean);
        let se_var = (1.0 - ab) * (2.0f64 / n as f64).sqrt();
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "var {var} vs {}", 1.0 - ab);
    }

    #[test]
    fn x0_round_trip() {
        // Round-trip oracle over 100 random (t, eps) cases.
        let s = build_schedule(20, 0.01, 0.25, ScheduleKind::Linear).unwrap();
        let mut worst = 0.0f64;
        for case in 0..100 {
            let x0 = random_image(8, 8, 100 + case);
            let eps = random_image(8, 8, 200 + case);
            let t = 1 + (case as usize * 7) % 20;
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            let rec = s.x0_from_eps(&xt, t, &eps).unwrap();
            worst = worst.max(rec.max_abs_diff(&x0));
        }
        assert!(worst < 1e-8, "worst round-trip error {worst}");
    }

    #[test]
    fn x0_from_zero_eps() {
        let s = build_schedule(10, 0.01, 0.1, ScheduleKind::Linear).unwrap();
        let xt = random_image(8, 8, 5);
        let zero = ComplexImage::zeros(1, 8, 8);
        let x0 = s.x0_from_eps(&xt, 3, &zero).unwrap();
        let expect = xt.scaled(1.0 / s.alpha_bar(3).sqrt());
        assert!(x0.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn t_out_of_range_rejected() {
        let s = build_schedule(5, 0.01, 0.1, ScheduleKind::Linear).unwrap();
        let x = random_image(8, 8, 6);
        let e = random_image(8, 8, 7);
        assert!(s.forward_noise(&x, 0, &e).is_err());
        assert!(s.forward_noise(&x, 6, &e).is_err());
        assert!(s.posterior_step(0).is_err());
    }

    #[test]
    fn singular_alpha_bar_rejected() {
        // Deep schedule drives alpha_bar below 1e-12.
        let mut betas = vec![0.999; 10];
        betas[0] = 0.9;
        let s = NoiseSchedule::from_betas(betas);
        assert!(s.alpha_bar(10) < 1e-12);
        let x = random_image(8, 8, 8);
        let e = random_image(8, 8, 9);
        assert!(s.x0_from_eps(&x, 10, &e).is_err());
    }
}
