//! Analytic Gaussian-mixture score model. The diffused marginal of a
//! diagonal-covariance mixture is available in closed form, which makes this
//! an exactness oracle for the sampler: the implied noise prediction is the
//! exact scaled negative score of the diffused density.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::schedule::NoiseSchedule;

/// One mixture component with a diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Array3<f64>,
    /// Per-dimension variance (diagonal of the covariance).
    pub variance: Array3<f64>,
}

/// A finite mixture of diagonal Gaussians over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    /// Standard normal over the given latent shape.
    pub fn standard(dim: (usize, usize, usize)) -> Self {
        Self {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean: Array3::zeros(dim),
                variance: Array3::ones(dim),
            }],
        }
    }

    /// Equal-weight isotropic components at the given means.
    pub fn isotropic(means: Vec<Array3<f64>>, variance: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::parameter("mixture needs at least one component"));
        }
        let weight = 1.0 / means.len() as f64;
        let components = means
            .into_iter()
            .map(|mean| {
                let variance = Array3::from_elem(mean.dim(), variance);
                GaussianComponent {
                    weight,
                    mean,
                    variance,
                }
            })
            .collect();
        Ok(Self { components })
    }

    pub fn validate(&self, dim: (usize, usize, usize)) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::parameter("mixture needs at least one component"));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(Error::parameter(format!(
                    "component {k} weight must be > 0, got {}",
                    c.weight
                )));
            }
            if c.mean.dim() != dim || c.variance.dim() != dim {
                return Err(Error::parameter(format!(
                    "component {k} shape does not match the latent shape {dim:?}"
                )));
            }
            if c.variance.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::parameter(format!(
                    "component {k} variances must be positive"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::parameter(format!(
                "component weights must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Log density of the mixture diffused to time `t` (up to dimension-wide
    /// constants that cancel in responsibilities but are kept for finite
    /// differencing).
    pub fn diffused_log_density(
        &self,
        x: &Array3<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        let abar = schedule.alpha_bar(t)?;
        let logs = self
            .components
            .iter()
            .map(|c| component_log_density(c, x, abar))
            .collect::<Vec<f64>>();
        Ok(log_sum_exp(&logs))
    }
}

fn component_log_density(c: &GaussianComponent, x: &Array3<f64>, abar: f64) -> f64 {
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for ((&xv, &mu), &var) in x.iter().zip(c.mean.iter()).zip(c.variance.iter()) {
        let m = abar.sqrt() * mu;
        let s = abar * var + (1.0 - abar);
        let d = xv - m;
        quad += d * d / s;
        log_det += s.ln();
    }
    let n = x.len() as f64;
    c.weight.ln() - 0.5 * (quad + log_det + n * (2.0 * std::f64::consts::PI).ln())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The exact noise prediction implied by the diffused mixture:
/// `-sqrt(1 - abar_t) * grad log p_t(x)`.
pub fn analytic_gaussian_eps(
    x_t: &LatentImage,
    t: usize,
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    mixture.validate(x_t.data.dim())?;
    let abar = schedule.alpha_bar(t)?;

    let logs: Vec<f64> = mixture
        .components
        .iter()
        .map(|c| component_log_density(c, &x_t.data, abar))
        .collect();
    let total = log_sum_exp(&logs);

    // grad log p = sum_k r_k * (-(x - m_k) / s_k), eps = -sqrt(1-abar) * grad.
    let noise_scale = (1.0 - abar).sqrt();
    let mut eps = Array3::zeros(x_t.data.dim());
    for (c, &log_k) in mixture.components.iter().zip(logs.iter()) {
        let resp = (log_k - total).exp();
        ndarray::Zip::from(&mut eps)
            .and(&x_t.data)
            .and(&c.mean)
            .and(&c.variance)
            .for_each(|e, &xv, &mu, &var| {
                let m = abar.sqrt() * mu;
                let s = abar * var + (1.0 - abar);
                *e += resp * noise_scale * (xv - m) / s;
            });
    }
    Ok(eps)
}

/// Broadcast mixture parameters as they appear in the run-config file: each
/// component is an isotropic Gaussian with a constant mean over the latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl MixtureSpec {
    /// The standard normal spec.
    pub fn standard() -> Self {
        Self {
            components: vec![ComponentSpec {
                weight: 1.0,
                mean: 0.0,
                variance: 1.0,
            }],
        }
    }

    pub fn build(&self, dim: (usize, usize, usize)) -> Result<GaussianMixture> {
        let mixture = GaussianMixture {
            components: self
                .components
                .iter()
                .map(|c| GaussianComponent {
                    weight: c.weight,
                    mean: Array3::from_elem(dim, c.mean),
                    variance: Array3::from_elem(dim, c.variance),
                })
                .collect(),
        };
        mixture.validate(dim)?;
        Ok(mixture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use crate::latent::standard_normal;
    use crate::rng::derive_rng;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn standard_normal_gives_scaled_identity_eps() {
        let schedule = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let mixture = GaussianMixture::standard((2, 2, 2));
        let mut rng = derive_rng(3, "test-analytic", 0);
        let x = LatentImage::new(standard_normal((2, 2, 2), &mut rng), 40).unwrap();
        let eps = analytic_gaussian_eps(&x, 40, &mixture, &schedule).unwrap();
        let scale = (1.0 - schedule.alpha_bar(40).unwrap()).sqrt();
        for (e, v) in eps.iter().zip(x.data.iter()) {
            assert_relative_eq!(*e, scale * v, max_relative = 1e-12);
        }
    }

    #[test]
    fn eps_vanishes_at_the_diffused_mean() {
        let schedule = make_linear_schedule(50, 1e-3, 0.1).unwrap();
        let mean = Array3::from_elem((1, 2, 1), 1.7);
        let mixture = GaussianMixture::isotropic(vec![mean.clone()], 1.0).unwrap();
        let t = 20;
        let abar = schedule.alpha_bar(t).unwrap();
        let x = LatentImage::new(mean.mapv(|v| abar.sqrt() * v), t).unwrap();
        let eps = analytic_gaussian_eps(&x, t, &mixture, &schedule).unwrap();
        for e in eps.iter() {
            assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_eps_at_origin() {
        let schedule = make_linear_schedule(50, 1e-3, 0.1).unwrap();
        let mu = Array3::from_elem((1, 1, 2), 0.9);
        let mixture =
            GaussianMixture::isotropic(vec![mu.clone(), mu.mapv(|v| -v)], 1.0).unwrap();
        let x = LatentImage::new(Array3::zeros((1, 1, 2)), 10).unwrap();
        let eps = analytic_gaussian_eps(&x, 10, &mixture, &schedule).unwrap();
        for e in eps.iter() {
            assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn non_normalized_weights_are_rejected() {
        let mut mixture = GaussianMixture::standard((1, 1, 1));
        mixture.components[0].weight = 0.7;
        let schedule = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x = LatentImage::new(Array3::zeros((1, 1, 1)), 1).unwrap();
        assert!(analytic_gaussian_eps(&x, 1, &mixture, &schedule).is_err());
    }

    #[test]
    fn matches_finite_difference_gradient() {
        // Central differences of the diffused log density at 20 random
        // points, h = 1e-4, relative error <= 1e-4.
        let schedule = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let dim = (2, 2, 1);
        let mut rng = derive_rng(17, "test-fd", 0);
        let m1 = standard_normal(dim, &mut rng);
        let m2 = standard_normal(dim, &mut rng);
        let mixture = GaussianMixture::isotropic(vec![m1, m2], 0.8).unwrap();
        let t = 35;
        let abar = schedule.alpha_bar(t).unwrap();
        let noise_scale = (1.0 - abar).sqrt();
        let h = 1e-4;

        for point in 0..20 {
            let _ = point;
            let x = LatentImage::new(standard_normal(dim, &mut rng), t).unwrap();
            let eps = analytic_gaussian_eps(&x, t, &mixture, &schedule).unwrap();
            for idx in 0..4 {
                let (a, b) = (idx / 2, idx % 2);
                let mut plus = x.data.clone();
                plus[[a, b, 0]] += h;
                let mut minus = x.data.clone();
                minus[[a, b, 0]] -= h;
                let grad = (mixture.diffused_log_density(&plus, t, &schedule).unwrap()
                    - mixture.diffused_log_density(&minus, t, &schedule).unwrap())
                    / (2.0 * h);
                let expected = -noise_scale * grad;
                let denom = expected.abs().max(1e-6);
                assert!(
                    (eps[[a, b, 0]] - expected).abs() / denom <= 1e-4,
                    "finite difference mismatch at {idx}: {} vs {expected}",
                    eps[[a, b, 0]]
                );
            }
        }
    }
}
