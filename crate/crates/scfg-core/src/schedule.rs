//! Noise schedules, forward corruption, reverse-step parameterizations, and
//! the deterministic DDIM update.
//!
//! Conventions: `t` runs over `1..=T` for per-step quantities, `alpha_bar(0)`
//! is defined as 1 so `t = 0` is the clean image, and the reverse-step
//! standard deviation uses the constant-variance choice `sigma_t = sqrt(beta_t)`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentImage;

/// Per-step beta/alpha/alpha-bar/sigma tables defining the diffusion chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from a per-step beta table, deriving the other fields.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::parameter("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0 < **b && **b < 1.0)) {
            return Err(Error::parameter(format!(
                "beta values must lie in (0, 1), got {b}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut product = 1.0;
        for a in &alphas {
            product *= a;
            alpha_bars.push(product);
        }
        let sigmas: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn step_count(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::parameter(format!(
                "step t={t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_step(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_step(t)?])
    }

    /// Cumulative product of alphas with the `alpha_bar(0) = 1` boundary.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check_step(t)?])
    }

    /// Reverse-step standard deviation, `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check_step(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Serializable schedule parameters as they appear in the run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Linear beta schedule inclusive of both endpoints.
pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::parameter("schedule needs t_max >= 1"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::parameter(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        let (x, y, z) = a.dim();
        let (p, q, r) = b.dim();
        return Err(Error::shape(&[x, y, z], &[p, q, r]));
    }
    Ok(())
}

/// One forward corruption step: `sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * noise`.
pub fn forward_step(
    x_prev: &LatentImage,
    t: usize,
    noise: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    check_same_shape(&x_prev.data, noise)?;
    let beta = schedule.beta(t)?;
    let keep = (1.0 - beta).sqrt();
    let add = beta.sqrt();
    let data = x_prev.data.mapv(|v| keep * v) + &noise.mapv(|v| add * v);
    Ok(LatentImage { data, step: t })
}

/// Closed-form marginal: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_marginal(
    x0: &LatentImage,
    t: usize,
    eps: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    check_same_shape(&x0.data, eps)?;
    let abar = schedule.alpha_bar(t)?;
    let signal = abar.sqrt();
    let noise = (1.0 - abar).sqrt();
    let data = x0.data.mapv(|v| signal * v) + &eps.mapv(|v| noise * v);
    Ok(LatentImage { data, step: t })
}

/// Reverse-step posterior mean with the standard denominator:
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean(
    x_t: &LatentImage,
    eps_hat: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    check_same_shape(&x_t.data, eps_hat)?;
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let abar = schedule.alpha_bar(t)?;
    let coef = beta / (1.0 - abar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    Ok((&x_t.data - &eps_hat.mapv(|v| coef * v)).mapv(|v| inv_sqrt_alpha * v))
}

/// Invert the closed-form marginal for the clean image:
/// `(x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &LatentImage,
    eps_hat: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    check_same_shape(&x_t.data, eps_hat)?;
    let abar = schedule.alpha_bar(t)?;
    if abar <= 0.0 {
        return Err(Error::Singularity(format!(
            "alpha_bar({t}) = {abar}; clean-image prediction undefined"
        )));
    }
    let noise = (1.0 - abar).sqrt();
    let inv_signal = 1.0 / abar.sqrt();
    Ok((&x_t.data - &eps_hat.mapv(|v| noise * v)).mapv(|v| inv_signal * v))
}

/// Deterministic DDIM update from `t` to `t_prev < t` (zero injected noise):
/// `sqrt(abar_prev) * predict_x0 + sqrt(1 - abar_prev) * eps_hat`.
pub fn ddim_step(
    x_t: &LatentImage,
    eps_hat: &Array3<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    if t_prev >= t {
        return Err(Error::parameter(format!(
            "DDIM step requires t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    let x0 = predict_x0(x_t, eps_hat, t, schedule)?;
    let abar_prev = schedule.alpha_bar(t_prev)?;
    let signal = abar_prev.sqrt();
    let noise = (1.0 - abar_prev).sqrt();
    let data = x0.mapv(|v| signal * v) + &eps_hat.mapv(|v| noise * v);
    Ok(LatentImage { data, step: t_prev })
}

/// Evenly spaced integer timesteps from `t_max` down to 0 inclusive.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(Error::parameter(format!(
            "step count must satisfy 1 <= steps <= t_max, got steps={steps}, t_max={t_max}"
        )));
    }
    let ts: Vec<usize> = (0..=steps)
        .map(|i| ((t_max * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    use crate::latent::standard_normal;
    use crate::rng::derive_rng;

    fn scalar_latent(v: f64, step: usize) -> LatentImage {
        LatentImage::new(Array3::from_elem((1, 1, 1), v), step).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn constant_beta_alpha_bar_is_power() {
        let s = make_linear_schedule(10, 0.1, 0.1).unwrap();
        assert_relative_eq!(s.alpha_bar(10).unwrap(), 0.9f64.powi(10), max_relative = 1e-12);
        assert_relative_eq!(s.alpha_bar(10).unwrap(), 0.3486784401, max_relative = 1e-10);
    }

    #[test]
    fn ddpm_default_chain_ends_near_pure_noise() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000).unwrap() < 5e-5);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_recursion_is_consistent() {
        let s = make_linear_schedule(200, 1e-3, 0.2).unwrap();
        for t in 1..=200 {
            let recomputed = s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap();
            assert_relative_eq!(s.alpha_bar(t).unwrap(), recomputed, max_relative = 1e-12);
        }
    }

    #[test]
    fn forward_step_scalar_arithmetic() {
        // beta = 0.19 at t=1 of a constant schedule.
        let s = make_linear_schedule(1, 0.19, 0.19).unwrap();
        let x = scalar_latent(1.0, 0);
        let noise = Array3::from_elem((1, 1, 1), 1.0);
        let y = forward_step(&x, 1, &noise, &s).unwrap();
        assert_relative_eq!(y.data[[0, 0, 0]], 0.9 + 0.19f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(y.data[[0, 0, 0]], 1.335889894354067, max_relative = 1e-12);
        assert_eq!(y.step, 1);
    }

    #[test]
    fn forward_step_shape_mismatch() {
        let s = make_linear_schedule(1, 0.19, 0.19).unwrap();
        let x = scalar_latent(1.0, 0);
        let noise = Array3::zeros((2, 1, 1));
        assert!(matches!(
            forward_step(&x, 1, &noise, &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_marginal_identity_at_t0() {
        let s = make_linear_schedule(10, 0.1, 0.1).unwrap();
        let x0 = scalar_latent(1.25, 0);
        let eps = Array3::from_elem((1, 1, 1), 3.0);
        let y = forward_marginal(&x0, 0, &eps, &s).unwrap();
        assert_eq!(y.data[[0, 0, 0]], 1.25);
    }

    #[test]
    fn forward_marginal_scalar_arithmetic() {
        // Constant beta 0.2 over two steps gives alpha_bar_2 = 0.64; use a
        // custom table for the exact 0.36 example instead.
        let s = NoiseSchedule::from_betas(vec![0.64]).unwrap();
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 0.36, max_relative = 1e-15);
        let x0 = scalar_latent(0.0, 0);
        let eps = Array3::from_elem((1, 1, 1), 1.0);
        let y = forward_marginal(&x0, 1, &eps, &s).unwrap();
        assert_relative_eq!(y.data[[0, 0, 0]], 0.8, max_relative = 1e-12);
    }

    #[test]
    fn forward_marginal_rejects_out_of_range_t() {
        let s = make_linear_schedule(10, 0.1, 0.1).unwrap();
        let x0 = scalar_latent(0.0, 0);
        let eps = Array3::zeros((1, 1, 1));
        assert!(forward_marginal(&x0, 11, &eps, &s).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        // eps_hat = 0 returns x_t / sqrt(alpha_t).
        let x = scalar_latent(1.0, 1);
        let zero = Array3::zeros((1, 1, 1));
        let m = posterior_mean(&x, &zero, 1, &s).unwrap();
        assert_relative_eq!(m[[0, 0, 0]], 1.0 / 0.81f64.sqrt(), max_relative = 1e-12);

        // Scalar example: alpha = abar = 0.81 at t=1.
        let eps = Array3::from_elem((1, 1, 1), 1.0);
        let m = posterior_mean(&x, &eps, 1, &s).unwrap();
        let expected = (1.0 - 0.19f64 / 0.19f64.sqrt()) / 0.81f64.sqrt();
        assert_relative_eq!(m[[0, 0, 0]], expected, max_relative = 1e-12);
        assert_relative_eq!(m[[0, 0, 0]], 0.626789, max_relative = 1e-5);
    }

    #[test]
    fn predict_x0_examples() {
        // alpha_bar = 0.25 via a single step with beta = 0.75.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x = scalar_latent(1.0, 1);
        let eps = Array3::from_elem((1, 1, 1), 0.5);
        let p = predict_x0(&x, &eps, 1, &s).unwrap();
        let expected = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert_relative_eq!(p[[0, 0, 0]], expected, max_relative = 1e-12);
        assert_relative_eq!(p[[0, 0, 0]], 1.133975, max_relative = 1e-6);

        let zero = Array3::zeros((1, 1, 1));
        let zero_latent = scalar_latent(0.0, 1);
        let p = predict_x0(&zero_latent, &zero, 1, &s).unwrap();
        assert_eq!(p[[0, 0, 0]], 0.0);
    }

    #[test]
    fn predict_x0_inverts_forward_marginal() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let mut rng = derive_rng(11, "test-invert", 0);
        let x0 = LatentImage::new(standard_normal((4, 4, 3), &mut rng), 0).unwrap();
        let eps = standard_normal((4, 4, 3), &mut rng);
        for t in [1, 37, 100] {
            let x_t = forward_marginal(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&x_t, &eps, t, &s).unwrap();
            for (a, b) in rec.iter().zip(x0.data.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn ddim_step_with_zero_eps_rescales() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let x = scalar_latent(2.0, 50);
        let zero = Array3::zeros((1, 1, 1));
        let y = ddim_step(&x, &zero, 50, 30, &s).unwrap();
        let expected = (s.alpha_bar(30).unwrap() / s.alpha_bar(50).unwrap()).sqrt() * 2.0;
        assert_relative_eq!(y.data[[0, 0, 0]], expected, max_relative = 1e-12);
        assert_eq!(y.step, 30);
    }

    #[test]
    fn ddim_step_to_t0_returns_predicted_x0() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let mut rng = derive_rng(5, "test-ddim-t0", 0);
        let x = LatentImage::new(standard_normal((2, 2, 1), &mut rng), 40).unwrap();
        let eps = standard_normal((2, 2, 1), &mut rng);
        let y = ddim_step(&x, &eps, 40, 0, &s).unwrap();
        let x0 = predict_x0(&x, &eps, 40, &s).unwrap();
        assert_eq!(y.data, x0);
    }

    #[test]
    fn ddim_step_rejects_non_decreasing_t() {
        let s = make_linear_schedule(10, 0.1, 0.1).unwrap();
        let x = scalar_latent(1.0, 5);
        let zero = Array3::zeros((1, 1, 1));
        assert!(ddim_step(&x, &zero, 5, 5, &s).is_err());
        assert!(ddim_step(&x, &zero, 5, 7, &s).is_err());
    }

    #[test]
    fn ddim_determinism_is_bitwise() {
        let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let mut rng = derive_rng(9, "test-determinism", 0);
        let x = LatentImage::new(standard_normal((3, 3, 2), &mut rng), 80).unwrap();
        let eps = standard_normal((3, 3, 2), &mut rng);
        let a = ddim_step(&x, &eps, 80, 60, &s).unwrap();
        let b = ddim_step(&x, &eps, 80, 60, &s).unwrap();
        assert!(a
            .data
            .iter()
            .zip(b.data.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn timesteps_are_even_and_terminal() {
        let ts = ddim_timesteps(100, 50).unwrap();
        assert_eq!(ts.len(), 51);
        assert_eq!(ts[0], 100);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 2));

        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
        assert_eq!(ddim_timesteps(10, 10).unwrap().len(), 11);
    }

    #[test]
    fn marginal_matches_iterated_chain_in_mean_and_variance() {
        // Monte-Carlo oracle: iterate the per-step corruption with fresh
        // noise and compare against the closed-form marginal moments.
        let s = make_linear_schedule(8, 0.05, 0.2).unwrap();
        let t = 8;
        let x0 = scalar_latent(0.7, 0);
        let n = 10_000;
        let mut rng = derive_rng(123, "test-mc-chain", 0);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut x = x0.clone();
            for step in 1..=t {
                let noise = standard_normal((1, 1, 1), &mut rng);
                x = forward_step(&x, step, &noise, &s).unwrap();
            }
            let v = x.data[[0, 0, 0]];
            sum += v;
            sum_sq += v * v;
        }
        let abar = s.alpha_bar(t).unwrap();
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected_mean = abar.sqrt() * 0.7;
        let expected_var = 1.0 - abar;
        let se_mean = (expected_var / n as f64).sqrt();
        let se_var = expected_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - expected_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {expected_mean} (3se = {})",
            3.0 * se_mean
        );
        assert!(
            (var - expected_var).abs() < 3.0 * se_var,
            "var {var} vs {expected_var} (3se = {})",
            3.0 * se_var
        );
    }
}
