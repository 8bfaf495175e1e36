//! Score composition: classic guidance mixing, classifier-score extraction,
//! the per-patch guidance-norm field, adaptive per-region scales, and the
//! composed per-region score.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::channel_norms;
use crate::segmentation::{BenchmarkMode, SegmentationMasks};

/// Guidance strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// One global scale for the whole image.
    Cfg,
    /// Per-region adaptive scales anchored to the benchmark region.
    Scfg,
}

/// Guidance parameters as they appear in the run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Global scale gamma.
    pub gamma: f64,
    pub mode: GuidanceMode,
    pub benchmark_mode: BenchmarkMode,
    /// Self-attention propagation steps used by segmentation.
    pub propagation_steps: usize,
    /// Keep PAD-token regions at the global scale instead of adapting them.
    #[serde(default)]
    pub freeze_pad_regions: bool,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::parameter(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.propagation_steps < 1 {
            return Err(Error::parameter("propagation steps must be >= 1"));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 7.5,
            mode: GuidanceMode::Scfg,
            benchmark_mode: BenchmarkMode::Foreground,
            propagation_steps: 4,
            freeze_pad_regions: false,
        }
    }
}

/// Per-patch 2-norm over channels of the conditional/unconditional
/// prediction difference.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceField {
    pub eta: Array1<f64>,
}

/// Per-region adaptive scales and their per-pixel expansion over the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    pub per_region: Vec<f64>,
    pub per_pixel: Array1<f64>,
}

impl ScaleMap {
    /// A constant map: every region and pixel at the global scale.
    pub fn uniform(gamma: f64, regions: usize, patches: usize) -> Self {
        Self {
            per_region: vec![gamma; regions],
            per_pixel: Array1::from_elem(patches, gamma),
        }
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        let (x, y, z) = a.dim();
        let (p, q, r) = b.dim();
        return Err(Error::shape(&[x, y, z], &[p, q, r]));
    }
    Ok(())
}

// The scale-1 and scale-0 collapses are exact by contract, not merely up to
// rounding, so both mixing functions branch on them identically.
#[inline]
fn mix(u: f64, c: f64, scale: f64) -> f64 {
    if scale == 1.0 {
        c
    } else if scale == 0.0 {
        u
    } else {
        u + scale * (c - u)
    }
}

/// Classic guidance mixing: `eps_uncond + gamma * (eps_cond - eps_uncond)`.
pub fn cfg_score(
    eps_uncond: &Array3<f64>,
    eps_cond: &Array3<f64>,
    gamma: f64,
) -> Result<Array3<f64>> {
    check_same_shape(eps_uncond, eps_cond)?;
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_uncond)
        .and(eps_cond)
        .for_each(|o, &u, &c| *o = mix(u, c, gamma));
    Ok(out)
}

/// Implicit-classifier gradient estimate:
/// `-(eps_cond - eps_uncond) / sigma_t`.
pub fn classifier_score(
    eps_uncond: &Array3<f64>,
    eps_cond: &Array3<f64>,
    sigma_t: f64,
) -> Result<Array3<f64>> {
    check_same_shape(eps_uncond, eps_cond)?;
    if !(sigma_t > 0.0) {
        return Err(Error::parameter(format!(
            "sigma_t must be > 0, got {sigma_t}"
        )));
    }
    let inv = -1.0 / sigma_t;
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_uncond)
        .and(eps_cond)
        .for_each(|o, &u, &c| *o = inv * (c - u));
    Ok(out)
}

/// Per-patch channel norm of the prediction difference, flattened row-major.
pub fn guidance_norm_field(
    eps_uncond: &Array3<f64>,
    eps_cond: &Array3<f64>,
) -> Result<GuidanceField> {
    check_same_shape(eps_uncond, eps_cond)?;
    let diff = eps_cond - eps_uncond;
    Ok(GuidanceField {
        eta: channel_norms(&diff),
    })
}

/// Masked sum of a field: `|m . eta|` with `|.|` the entry sum.
fn masked_sum(mask: &[bool], eta: &Array1<f64>) -> f64 {
    mask.iter()
        .zip(eta.iter())
        .filter(|(&m, _)| m)
        .map(|(_, &v)| v)
        .sum()
}

/// Per-region adaptive scales: each region's mean guidance norm is rescaled
/// onto `gamma` times the benchmark region's mean. Regions that are empty or
/// carry zero guidance energy fall back to the global scale.
pub fn adaptive_scales(
    field: &GuidanceField,
    masks: &SegmentationMasks,
    gamma: f64,
) -> Result<ScaleMap> {
    masks.validate_partition()?;
    let hw = masks.patch_count();
    if field.eta.len() != hw {
        return Err(Error::shape(&[hw], &[field.eta.len()]));
    }
    if field.eta.iter().any(|v| *v < 0.0) {
        return Err(Error::parameter("guidance field entries must be >= 0"));
    }
    let bench_size = masks.benchmark_cardinality();
    if bench_size == 0 {
        return Err(Error::parameter("benchmark mask must be nonempty"));
    }
    let bench_energy = masked_sum(&masks.benchmark, &field.eta);

    let mut per_region = Vec::with_capacity(masks.token_count());
    for (i, mask) in masks.masks.iter().enumerate() {
        let size = mask.iter().filter(|&&b| b).count();
        if size == 0 {
            per_region.push(gamma);
            continue;
        }
        let energy = masked_sum(mask, &field.eta);
        if energy <= 0.0 {
            log::warn!("region {i} carries zero guidance energy; keeping the global scale");
            per_region.push(gamma);
            continue;
        }
        per_region.push(gamma * (bench_energy / energy) * (size as f64 / bench_size as f64));
    }

    let mut per_pixel = Array1::zeros(hw);
    for (mask, &scale) in masks.masks.iter().zip(per_region.iter()) {
        for (s, &inside) in mask.iter().enumerate() {
            if inside {
                per_pixel[s] = scale;
            }
        }
    }
    Ok(ScaleMap {
        per_region,
        per_pixel,
    })
}

/// Composed score: `eps_uncond + per_pixel . (eps_cond - eps_uncond)`, the
/// per-region sum form of the guidance update. With every region at the same
/// scale this is exactly the classic mixing rule.
pub fn scfg_score(
    eps_uncond: &Array3<f64>,
    eps_cond: &Array3<f64>,
    masks: &SegmentationMasks,
    scales: &ScaleMap,
) -> Result<Array3<f64>> {
    check_same_shape(eps_uncond, eps_cond)?;
    masks.validate_partition()?;
    let (h, w, ch) = eps_uncond.dim();
    if masks.resolution != (h, w) {
        return Err(Error::shape(&[h, w], &[masks.resolution.0, masks.resolution.1]));
    }
    if scales.per_pixel.len() != h * w {
        return Err(Error::shape(&[h * w], &[scales.per_pixel.len()]));
    }
    let mut out = eps_uncond.clone();
    for y in 0..h {
        for x in 0..w {
            let scale = scales.per_pixel[y * w + x];
            for c in 0..ch {
                out[[y, x, c]] = mix(eps_uncond[[y, x, c]], eps_cond[[y, x, c]], scale);
            }
        }
    }
    Ok(out)
}

/// Split a score tensor into per-region components `m_i . score`. The
/// element-wise sum of the outputs reconstructs the input exactly.
pub fn decompose_classifier_score(
    score: &Array3<f64>,
    masks: &SegmentationMasks,
) -> Result<Vec<Array3<f64>>> {
    masks.validate_partition()?;
    let (h, w, _) = score.dim();
    if masks.resolution != (h, w) {
        return Err(Error::shape(&[h, w], &[masks.resolution.0, masks.resolution.1]));
    }
    let mut parts = Vec::with_capacity(masks.token_count());
    for mask in &masks.masks {
        let mut part = score.clone();
        for y in 0..h {
            for x in 0..w {
                if !mask[y * w + x] {
                    for c in 0..part.dim().2 {
                        part[[y, x, c]] = 0.0;
                    }
                }
            }
        }
        parts.push(part);
    }
    Ok(parts)
}

/// The core rescaling contract of the adaptive scales: for every nonempty
/// region with nonzero energy, `gamma_i * |m_i . eta| / |m_i|` equals
/// `gamma * |m_b . eta| / |m_b|`. Returns the worst relative deviation.
pub fn rescaling_identity_error(
    field: &GuidanceField,
    masks: &SegmentationMasks,
    scales: &ScaleMap,
    gamma: f64,
) -> f64 {
    let bench_energy = masked_sum(&masks.benchmark, &field.eta);
    let bench_size = masks.benchmark_cardinality();
    if bench_size == 0 {
        return f64::NAN;
    }
    let target = gamma * bench_energy / bench_size as f64;
    let mut worst: f64 = 0.0;
    for (i, mask) in masks.masks.iter().enumerate() {
        let size = mask.iter().filter(|&&b| b).count();
        if size == 0 {
            continue;
        }
        let energy = masked_sum(mask, &field.eta);
        if energy <= 0.0 {
            continue;
        }
        let achieved = scales.per_region[i] * energy / size as f64;
        let denom = target.abs().max(f64::MIN_POSITIVE);
        worst = worst.max((achieved - target).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::Rng;

    use crate::latent::standard_normal;
    use crate::rng::derive_rng;

    fn two_region_masks() -> SegmentationMasks {
        SegmentationMasks {
            masks: vec![
                vec![true, true, false, false],
                vec![false, false, true, true],
            ],
            benchmark: vec![true; 4],
            resolution: (1, 4),
        }
    }

    #[test]
    fn cfg_collapses_at_unit_and_zero_gamma() {
        let mut rng = derive_rng(3, "test-cfg", 0);
        let u = standard_normal((2, 2, 3), &mut rng);
        let c = standard_normal((2, 2, 3), &mut rng);
        let at_one = cfg_score(&u, &c, 1.0).unwrap();
        assert!(at_one.iter().zip(c.iter()).all(|(a, b)| a == b));
        let at_zero = cfg_score(&u, &c, 0.0).unwrap();
        assert!(at_zero.iter().zip(u.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn cfg_scalar_arithmetic() {
        let u = Array3::zeros((1, 2, 1));
        let c = Array3::from_elem((1, 2, 1), 1.0);
        let out = cfg_score(&u, &c, 7.5).unwrap();
        assert!(out.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn classifier_score_examples() {
        let u = Array3::zeros((1, 2, 1));
        let c = Array3::from_elem((1, 2, 1), 1.0);
        let s = classifier_score(&u, &c, 0.5).unwrap();
        assert!(s.iter().all(|&v| v == -2.0));

        let equal = classifier_score(&c, &c, 0.5).unwrap();
        assert!(equal.iter().all(|&v| v == 0.0));

        let halved = classifier_score(&u, &c, 1.0).unwrap();
        for (a, b) in halved.iter().zip(s.iter()) {
            assert_relative_eq!(*a * 2.0, *b, max_relative = 1e-15);
        }

        assert!(classifier_score(&u, &c, 0.0).is_err());
        assert!(classifier_score(&u, &c, -1.0).is_err());
    }

    #[test]
    fn norm_field_examples() {
        // Single channel: absolute values.
        let u = Array3::zeros((1, 2, 1));
        let mut c = Array3::zeros((1, 2, 1));
        c[[0, 0, 0]] = 3.0;
        c[[0, 1, 0]] = -4.0;
        let field = guidance_norm_field(&u, &c).unwrap();
        assert_eq!(field.eta.to_vec(), vec![3.0, 4.0]);

        // Two channels: 3-4-5 triangle.
        let u = Array3::zeros((1, 1, 2));
        let mut c = Array3::zeros((1, 1, 2));
        c[[0, 0, 0]] = 3.0;
        c[[0, 0, 1]] = 4.0;
        let field = guidance_norm_field(&u, &c).unwrap();
        assert_relative_eq!(field.eta[0], 5.0, max_relative = 1e-15);

        // Equal inputs give the zero field.
        let field = guidance_norm_field(&c, &c).unwrap();
        assert!(field.eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptive_scales_hand_example() {
        let field = GuidanceField {
            eta: ndarray::array![1.0, 1.0, 3.0, 3.0],
        };
        let scales = adaptive_scales(&field, &two_region_masks(), 2.0).unwrap();
        assert_relative_eq!(scales.per_region[0], 4.0, max_relative = 1e-12);
        // Region 1: 2 * (8/6) * (2/4) = 4/3.
        assert_relative_eq!(scales.per_region[1], 4.0 / 3.0, max_relative = 1e-12);
        assert_eq!(scales.per_pixel.to_vec()[..2], [4.0, 4.0]);
    }

    #[test]
    fn uniform_field_keeps_global_scale() {
        let field = GuidanceField {
            eta: Array1::from_elem(4, 0.37),
        };
        let scales = adaptive_scales(&field, &two_region_masks(), 5.0).unwrap();
        for &g in &scales.per_region {
            assert_relative_eq!(g, 5.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn whole_image_region_keeps_global_scale() {
        let masks = SegmentationMasks {
            masks: vec![vec![true; 4]],
            benchmark: vec![true; 4],
            resolution: (1, 4),
        };
        let field = GuidanceField {
            eta: ndarray::array![0.1, 0.4, 0.2, 0.9],
        };
        let scales = adaptive_scales(&field, &masks, 3.0).unwrap();
        assert_eq!(scales.per_region[0], 3.0);
    }

    #[test]
    fn degenerate_regions_fall_back_to_gamma() {
        let masks = SegmentationMasks {
            masks: vec![
                vec![true, true, true, false],
                vec![false, false, false, true],
            ],
            benchmark: vec![true; 4],
            resolution: (1, 4),
        };
        // Region 1 has a patch but zero energy there.
        let field = GuidanceField {
            eta: ndarray::array![1.0, 2.0, 3.0, 0.0],
        };
        let scales = adaptive_scales(&field, &masks, 2.5).unwrap();
        assert_eq!(scales.per_region[1], 2.5);
    }

    #[test]
    fn rescaling_identity_holds() {
        let mut rng = derive_rng(8, "test-rescale", 0);
        let eta = Array1::from_shape_simple_fn(16, || rng.random::<f64>() + 0.01);
        let field = GuidanceField { eta };
        let masks = SegmentationMasks {
            masks: vec![
                (0..16).map(|s| s < 5).collect(),
                (0..16).map(|s| (5..9).contains(&s)).collect(),
                (0..16).map(|s| s >= 9).collect(),
            ],
            benchmark: (0..16).map(|s| s % 2 == 0).collect(),
            resolution: (4, 4),
        };
        let scales = adaptive_scales(&field, &masks, 7.5).unwrap();
        let err = rescaling_identity_error(&field, &masks, &scales, 7.5);
        assert!(err <= 1e-10, "worst relative deviation {err}");
    }

    #[test]
    fn scfg_with_uniform_scales_is_cfg() {
        let mut rng = derive_rng(10, "test-reduce", 0);
        let u = standard_normal((2, 2, 3), &mut rng).mapv(|v| 10.0 * v);
        let c = standard_normal((2, 2, 3), &mut rng).mapv(|v| 10.0 * v);
        let masks = SegmentationMasks {
            masks: vec![
                vec![true, false, true, false],
                vec![false, true, false, true],
            ],
            benchmark: vec![true; 4],
            resolution: (2, 2),
        };
        let scales = ScaleMap::uniform(7.5, 2, 4);
        let composed = scfg_score(&u, &c, &masks, &scales).unwrap();
        let classic = cfg_score(&u, &c, 7.5).unwrap();
        for (a, b) in composed.iter().zip(classic.iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn zero_scale_region_returns_unconditional() {
        let mut rng = derive_rng(11, "test-zero-region", 0);
        let u = standard_normal((1, 4, 2), &mut rng);
        let c = standard_normal((1, 4, 2), &mut rng);
        let masks = two_region_masks();
        let scales = ScaleMap {
            per_region: vec![0.0, 2.0],
            per_pixel: ndarray::array![0.0, 0.0, 2.0, 2.0],
        };
        let out = scfg_score(&u, &c, &masks, &scales).unwrap();
        for x in 0..2 {
            for ch in 0..2 {
                assert_eq!(out[[0, x, ch]], u[[0, x, ch]]);
            }
        }
    }

    #[test]
    fn decompose_reconstructs_and_is_disjoint() {
        let mut rng = derive_rng(12, "test-decompose", 0);
        let score = standard_normal((1, 4, 2), &mut rng);
        let masks = two_region_masks();
        let parts = decompose_classifier_score(&score, &masks).unwrap();
        assert_eq!(parts.len(), 2);
        let sum = &parts[0] + &parts[1];
        assert_eq!(sum, score);
        let product = &parts[0] * &parts[1];
        assert!(product.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_region_decomposition_is_identity() {
        let mut rng = derive_rng(13, "test-single", 0);
        let score = standard_normal((2, 2, 1), &mut rng);
        let masks = SegmentationMasks {
            masks: vec![vec![true; 4]],
            benchmark: vec![true; 4],
            resolution: (2, 2),
        };
        let parts = decompose_classifier_score(&score, &masks).unwrap();
        assert_eq!(parts[0], score);
    }

    #[test]
    fn non_partition_masks_are_rejected() {
        let mut masks = two_region_masks();
        masks.masks[1][0] = true; // patch 0 now owned twice
        let mut rng = derive_rng(14, "test-bad-masks", 0);
        let u = standard_normal((1, 4, 1), &mut rng);
        let c = standard_normal((1, 4, 1), &mut rng);
        let scales = ScaleMap::uniform(1.0, 2, 4);
        assert!(matches!(
            scfg_score(&u, &c, &masks, &scales),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scales_are_linear_in_gamma() {
        let mut rng = derive_rng(15, "test-linear", 0);
        let eta = Array1::from_shape_simple_fn(4, || rng.random::<f64>() + 0.1);
        let field = GuidanceField { eta };
        let masks = two_region_masks();
        let at_two = adaptive_scales(&field, &masks, 2.0).unwrap();
        let at_six = adaptive_scales(&field, &masks, 6.0).unwrap();
        for (a, b) in at_two.per_region.iter().zip(at_six.per_region.iter()) {
            assert_relative_eq!(3.0 * a, *b, max_relative = 1e-12);
        }
    }
}
