//! End-to-end denoising loop wiring the model, segmentation, guidance, and
//! sampler together, with per-step per-region diagnostics and the paired
//! comparison harness.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchitectureConfig, SeededDenoiser};
use crate::error::{Error, Result};
use crate::gaussian::{analytic_gaussian_eps, GaussianMixture, MixtureSpec};
use crate::guidance::{
    adaptive_scales, cfg_score, guidance_norm_field, rescaling_identity_error, scfg_score,
    GuidanceConfig, GuidanceMode, ScaleMap,
};
use crate::latent::{channel_norms, standard_normal, LatentImage};
use crate::prompt::{empty_prompt, PromptSpec, TextPrompt};
use crate::rng::derive_rng;
use crate::schedule::{ddim_step, ddim_timesteps, NoiseSchedule, ScheduleConfig};
use crate::segmentation::{
    foreground_mask, segment_records, upsample_mask, BenchmarkMode, SegmentationMasks,
};

/// Sampler selector. Only the deterministic DDIM update is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddim,
}

/// The denoising backend of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Seeded attention denoiser emitting attention records.
    Attention(ArchitectureConfig),
    /// Analytic mixture score model (no attention; used as a sampler oracle).
    AnalyticGaussian {
        latent: (usize, usize, usize),
        mixture: MixtureSpec,
    },
}

impl ModelSpec {
    pub fn latent_dim(&self) -> (usize, usize, usize) {
        match self {
            ModelSpec::Attention(arch) => arch.latent,
            ModelSpec::AnalyticGaussian { latent, .. } => *latent,
        }
    }
}

/// A full run description; this is what the run-config file holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSpec,
    pub prompt: PromptSpec,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerKind,
    /// Number of DDIM steps (must not exceed the schedule length).
    pub steps: usize,
    pub seed: u64,
    /// Output directory; unused by the library path, consumed by the CLI.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// The pinned desk-scale scenario: 16x16x4 latent, five tokens, 50 DDIM
    /// steps over a 100-step chain.
    pub fn standard_toy() -> Self {
        Self {
            schedule: ScheduleConfig {
                t_max: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            model: ModelSpec::Attention(ArchitectureConfig::standard_toy()),
            prompt: PromptSpec {
                length: 5,
                content_tokens: vec![2, 3, 4],
            },
            guidance: GuidanceConfig::default(),
            sampler: SamplerKind::Ddim,
            steps: 50,
            seed: 17,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.steps < 1 || self.steps > self.schedule.t_max {
            return Err(Error::parameter(format!(
                "steps must satisfy 1 <= steps <= t_max, got {} with t_max {}",
                self.steps, self.schedule.t_max
            )));
        }
        match &self.model {
            ModelSpec::Attention(arch) => {
                arch.validate()?;
                if self.prompt.content_tokens.len() + 1 > self.prompt.length {
                    return Err(Error::parameter(
                        "prompt content does not fit the prompt length",
                    ));
                }
            }
            ModelSpec::AnalyticGaussian { latent, mixture } => {
                mixture.build(*latent)?;
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> (usize, usize, usize) {
        self.model.latent_dim()
    }
}

/// Per-step diagnostics: everything needed for the per-region norm curves.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub region_sizes: Vec<usize>,
    /// Mean over each region of the per-patch guidance norm (classifier
    /// score in sigma_t units). NaN for empty regions.
    pub classifier_norms: Vec<f64>,
    /// Mean over each region of the per-patch unconditional prediction norm.
    pub diffusion_norms: Vec<f64>,
    /// The scale applied to each region this step.
    pub scales: Vec<f64>,
}

/// Per-step, per-region norms across a sampling run. The region count is
/// fixed for the whole run (the token set does not change).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub region_count: usize,
    pub steps: Vec<StepLog>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub sample: LatentImage,
    pub log: TrajectoryLog,
    /// The scale map of the final executed step, at latent resolution.
    pub final_scales: ScaleMap,
}

enum Backend {
    Attention(SeededDenoiser),
    Analytic(GaussianMixture),
}

/// Tolerance of the in-loop rescaling contract check.
const RESCALING_CONTRACT_TOL: f64 = 1e-8;

/// Run the full denoising loop. Deterministic for a fixed config.
pub fn run_sampling(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let (h, w, ch) = config.latent_dim();
    let hw = h * w;

    let backend = match &config.model {
        ModelSpec::Attention(arch) => {
            Backend::Attention(SeededDenoiser::new(arch.clone(), config.seed)?)
        }
        ModelSpec::AnalyticGaussian { latent, mixture } => {
            Backend::Analytic(mixture.build(*latent)?)
        }
    };
    let prompts = match &config.model {
        ModelSpec::Attention(arch) => {
            let cond = config.prompt.build(arch.text_dim, config.seed)?;
            let uncond = empty_prompt(config.prompt.length, arch.text_dim, config.seed)?;
            Some((cond, uncond))
        }
        ModelSpec::AnalyticGaussian { .. } => None,
    };
    let region_count = match &prompts {
        Some((cond, _)) => cond.len(),
        None => 1,
    };

    let timesteps = ddim_timesteps(config.schedule.t_max, config.steps)?;
    let mut rng = derive_rng(config.seed, "init-latent", 0);
    let mut x = LatentImage::new(standard_normal((h, w, ch), &mut rng), timesteps[0])?;

    let mut steps = Vec::with_capacity(config.steps);
    let mut final_scales = ScaleMap::uniform(config.guidance.gamma, region_count, hw);

    for i in 0..config.steps {
        let t = timesteps[i];
        let t_prev = timesteps[i + 1];
        let (next, log, scales) = sample_step(
            &backend,
            &prompts,
            &x,
            t,
            t_prev,
            &schedule,
            &config.guidance,
            region_count,
            (h, w),
        )
        .map_err(|e| Error::StepFailed {
            step: i,
            t,
            source: Box::new(e),
        })?;
        x = next;
        steps.push(log);
        final_scales = scales;
    }

    let _ = ch;
    Ok(RunArtifacts {
        sample: x,
        log: TrajectoryLog {
            region_count,
            steps,
        },
        final_scales,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    backend: &Backend,
    prompts: &Option<(TextPrompt, TextPrompt)>,
    x: &LatentImage,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    region_count: usize,
    latent_res: (usize, usize),
) -> Result<(LatentImage, StepLog, ScaleMap)> {
    let hw = latent_res.0 * latent_res.1;

    let (eps_cond, eps_uncond, records_cond, records_uncond) = match backend {
        Backend::Attention(model) => {
            let (cond, uncond) = prompts
                .as_ref()
                .expect("attention backend always carries prompts");
            let out_c = model.forward(x, t, cond)?;
            let out_u = model.forward(x, t, uncond)?;
            (out_c.eps_pred, out_u.eps_pred, out_c.records, out_u.records)
        }
        Backend::Analytic(mixture) => {
            let eps = analytic_gaussian_eps(x, t, mixture, schedule)?;
            (eps.clone(), eps, Vec::new(), Vec::new())
        }
    };

    // Token masks come from the conditional pass; the benchmark region comes
    // from the START region of the unconditional pass. A backend without
    // attention gets the trivial one-region segmentation.
    let masks = if records_cond.is_empty() {
        SegmentationMasks {
            masks: vec![vec![true; hw]],
            benchmark: vec![true; hw],
            resolution: latent_res,
        }
    } else {
        let seg = segment_records(&records_cond, true, guidance.propagation_steps)?;
        let mut latent_masks = seg.upsample(latent_res)?;
        if guidance.mode == GuidanceMode::Scfg {
            latent_masks.benchmark = match guidance.benchmark_mode {
                BenchmarkMode::Mean => vec![true; hw],
                BenchmarkMode::Foreground => {
                    let seg_uncond =
                        segment_records(&records_uncond, true, guidance.propagation_steps)?;
                    let fg = foreground_mask(&seg_uncond, 0, BenchmarkMode::Foreground)?;
                    upsample_mask(&fg, seg_uncond.resolution, latent_res)?
                }
            };
        }
        latent_masks
    };
    masks.validate_partition()?;

    let field = guidance_norm_field(&eps_uncond, &eps_cond)?;
    let scales = match guidance.mode {
        GuidanceMode::Cfg => ScaleMap::uniform(guidance.gamma, region_count, hw),
        GuidanceMode::Scfg => {
            let mut scales = adaptive_scales(&field, &masks, guidance.gamma)?;
            let err = rescaling_identity_error(&field, &masks, &scales, guidance.gamma);
            if !(err <= RESCALING_CONTRACT_TOL) {
                return Err(Error::contract(format!(
                    "rescaling identity violated: relative deviation {err}"
                )));
            }
            if guidance.freeze_pad_regions {
                if let Some((cond, _)) = prompts {
                    for position in cond.pad_positions() {
                        scales.per_region[position] = guidance.gamma;
                        for (s, &inside) in masks.masks[position].iter().enumerate() {
                            if inside {
                                scales.per_pixel[s] = guidance.gamma;
                            }
                        }
                    }
                }
            }
            scales
        }
    };

    let diffusion_field = channel_norms(&eps_uncond);
    let mut region_sizes = vec![0usize; region_count];
    let mut classifier_norms = vec![f64::NAN; region_count];
    let mut diffusion_norms = vec![f64::NAN; region_count];
    for (i, mask) in masks.masks.iter().enumerate() {
        let size = mask.iter().filter(|&&b| b).count();
        region_sizes[i] = size;
        if size > 0 {
            let inv = 1.0 / size as f64;
            classifier_norms[i] = mask
                .iter()
                .zip(field.eta.iter())
                .filter(|(&m, _)| m)
                .map(|(_, &v)| v)
                .sum::<f64>()
                * inv;
            diffusion_norms[i] = mask
                .iter()
                .zip(diffusion_field.iter())
                .filter(|(&m, _)| m)
                .map(|(_, &v)| v)
                .sum::<f64>()
                * inv;
        }
    }

    let eps_hat = match guidance.mode {
        GuidanceMode::Cfg => cfg_score(&eps_uncond, &eps_cond, guidance.gamma)?,
        GuidanceMode::Scfg => scfg_score(&eps_uncond, &eps_cond, &masks, &scales)?,
    };
    let next = ddim_step(x, &eps_hat, t, t_prev, schedule)?;

    let log = StepLog {
        t,
        region_sizes,
        classifier_norms,
        diffusion_norms,
        scales: scales.per_region.clone(),
    };
    Ok((next, log, scales))
}

/// The per-region norm table: one row per step, columns
/// `step, classifier_norm_r0.., diffusion_norm_r0..`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCurves {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn region_norm_curves(log: &TrajectoryLog) -> Result<NormCurves> {
    if log.steps.is_empty() {
        return Err(Error::parameter("trajectory log is empty"));
    }
    let r = log.region_count;
    let mut columns = Vec::with_capacity(1 + 2 * r);
    columns.push("step".to_string());
    for i in 0..r {
        columns.push(format!("classifier_norm_r{i}"));
    }
    for i in 0..r {
        columns.push(format!("diffusion_norm_r{i}"));
    }
    let rows = log
        .steps
        .iter()
        .map(|s| {
            let mut row = Vec::with_capacity(1 + 2 * r);
            row.push(s.t as f64);
            row.extend_from_slice(&s.classifier_norms);
            row.extend_from_slice(&s.diffusion_norms);
            row
        })
        .collect();
    Ok(NormCurves { columns, rows })
}

/// Population coefficient of variation of the per-region classifier norms at
/// each step, over nonempty regions. Returns the empty series when the log
/// has a single region slot.
pub fn dispersion_stat(log: &TrajectoryLog) -> Vec<(usize, f64)> {
    if log.region_count < 2 {
        return Vec::new();
    }
    log.steps
        .iter()
        .map(|s| {
            let values: Vec<f64> = s
                .classifier_norms
                .iter()
                .zip(s.region_sizes.iter())
                .filter(|(v, &n)| n > 0 && v.is_finite())
                .map(|(&v, _)| v)
                .collect();
            let cv = if values.is_empty() {
                f64::NAN
            } else {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                if mean == 0.0 {
                    0.0
                } else {
                    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / values.len() as f64;
                    var.sqrt() / mean
                }
            };
            (s.t, cv)
        })
        .collect()
}

/// One row of the paired comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparePoint {
    pub t: usize,
    pub cv_cfg_mean: f64,
    pub cv_scfg_mean: f64,
}

/// Seed-averaged dispersion comparison between the two guidance modes.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub per_step: Vec<ComparePoint>,
    pub mean_cv_cfg: f64,
    pub mean_cv_scfg: f64,
    /// Fraction of steps where the seed-mean dispersion is strictly lower
    /// under the adaptive mode.
    pub fraction_scfg_lower: f64,
}

/// Run paired trajectories (same seed in both arms) for `seeds` consecutive
/// seeds starting at the config seed and average the per-step dispersion.
pub fn compare_cfg_scfg(config: &RunConfig, seeds: usize) -> Result<CompareSummary> {
    if seeds < 1 {
        return Err(Error::parameter("need at least one seed"));
    }
    let mut sums_cfg = vec![0.0f64; config.steps];
    let mut sums_scfg = vec![0.0f64; config.steps];
    let mut counts_cfg = vec![0usize; config.steps];
    let mut counts_scfg = vec![0usize; config.steps];
    let mut ts: Option<Vec<usize>> = None;

    for offset in 0..seeds {
        let mut arm = config.clone();
        arm.seed = config.seed.wrapping_add(offset as u64);

        arm.guidance.mode = GuidanceMode::Cfg;
        let cfg_run = run_sampling(&arm)?;
        arm.guidance.mode = GuidanceMode::Scfg;
        let scfg_run = run_sampling(&arm)?;

        let cfg_series = dispersion_stat(&cfg_run.log);
        let scfg_series = dispersion_stat(&scfg_run.log);
        if ts.is_none() {
            ts = Some(cfg_series.iter().map(|(t, _)| *t).collect());
        }
        for (i, (_, cv)) in cfg_series.iter().enumerate() {
            if cv.is_finite() {
                sums_cfg[i] += cv;
                counts_cfg[i] += 1;
            }
        }
        for (i, (_, cv)) in scfg_series.iter().enumerate() {
            if cv.is_finite() {
                sums_scfg[i] += cv;
                counts_scfg[i] += 1;
            }
        }
    }

    let ts = ts.unwrap_or_default();
    let mut per_step = Vec::with_capacity(ts.len());
    let mut lower = 0usize;
    let mut total_cfg = 0.0;
    let mut total_scfg = 0.0;
    for (i, &t) in ts.iter().enumerate() {
        let cfg_mean = if counts_cfg[i] > 0 {
            sums_cfg[i] / counts_cfg[i] as f64
        } else {
            f64::NAN
        };
        let scfg_mean = if counts_scfg[i] > 0 {
            sums_scfg[i] / counts_scfg[i] as f64
        } else {
            f64::NAN
        };
        if scfg_mean < cfg_mean {
            lower += 1;
        }
        total_cfg += cfg_mean;
        total_scfg += scfg_mean;
        per_step.push(ComparePoint {
            t,
            cv_cfg_mean: cfg_mean,
            cv_scfg_mean: scfg_mean,
        });
    }
    let n = per_step.len().max(1) as f64;
    Ok(CompareSummary {
        per_step,
        mean_cv_cfg: total_cfg / n,
        mean_cv_scfg: total_scfg / n,
        fraction_scfg_lower: lower as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceMode;

    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::standard_toy();
        config.model = ModelSpec::Attention(ArchitectureConfig {
            latent: (8, 8, 3),
            layer_resolutions: vec![(8, 8), (4, 4)],
            feature_dim: 8,
            text_dim: 8,
            attn_dim: 8,
            heads: 2,
            time_features: 4,
            attention_gain: 2.0,
            positional_strength: 1.0,
            gate_strength: 1.0,
            token_gain_spread: 0.5,
            alignment_bias: 1.0,
        });
        config.prompt = PromptSpec {
            length: 4,
            content_tokens: vec![2, 3],
        };
        config.steps = 10;
        config
    }

    fn bits(x: &LatentImage) -> Vec<u64> {
        x.data.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn runs_are_reproducible() {
        let config = tiny_config();
        let a = run_sampling(&config).unwrap();
        let b = run_sampling(&config).unwrap();
        assert_eq!(bits(&a.sample), bits(&b.sample));
        assert_eq!(a.log.steps.len(), 10);
        for (sa, sb) in a.log.steps.iter().zip(b.log.steps.iter()) {
            assert_eq!(sa.region_sizes, sb.region_sizes);
            assert_eq!(
                sa.scales.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sb.scales.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn degenerate_uniform_attention_reduces_to_cfg() {
        let mut config = tiny_config();
        if let ModelSpec::Attention(arch) = &mut config.model {
            arch.attention_gain = 0.0;
        }
        config.guidance.mode = GuidanceMode::Cfg;
        let cfg_run = run_sampling(&config).unwrap();
        config.guidance.mode = GuidanceMode::Scfg;
        let scfg_run = run_sampling(&config).unwrap();
        assert_eq!(bits(&cfg_run.sample), bits(&scfg_run.sample));
    }

    #[test]
    fn scfg_run_satisfies_rescaling_contract_and_partition() {
        // The in-loop checks are hard errors; a full run passing is the
        // assertion.
        let config = tiny_config();
        let artifacts = run_sampling(&config).unwrap();
        assert_eq!(artifacts.log.region_count, 4);
        assert_eq!(artifacts.sample.step, 0);
    }

    #[test]
    fn analytic_backend_mode_cfg_gamma_one_matches_unconditional_trajectory() {
        let mut config = RunConfig::standard_toy();
        config.model = ModelSpec::AnalyticGaussian {
            latent: (4, 4, 2),
            mixture: MixtureSpec::standard(),
        };
        config.guidance.mode = GuidanceMode::Cfg;
        config.guidance.gamma = 1.0;
        config.steps = 25;
        let artifacts = run_sampling(&config).unwrap();
        assert_eq!(artifacts.log.region_count, 1);
        // gamma = 1 with identical cond/uncond scores: the guided trajectory
        // equals the plain score trajectory; dispersion over one region is
        // the empty series.
        assert!(dispersion_stat(&artifacts.log).is_empty());
    }

    #[test]
    fn norm_curve_schema() {
        let config = tiny_config();
        let artifacts = run_sampling(&config).unwrap();
        let curves = region_norm_curves(&artifacts.log).unwrap();
        assert_eq!(curves.columns.len(), 2 * 4 + 1);
        assert_eq!(curves.columns[0], "step");
        assert_eq!(curves.rows.len(), 10);
        for row in &curves.rows {
            assert_eq!(row.len(), curves.columns.len());
        }
    }

    #[test]
    fn dispersion_of_constant_norms_is_zero() {
        let log = TrajectoryLog {
            region_count: 3,
            steps: vec![StepLog {
                t: 10,
                region_sizes: vec![4, 4, 4],
                classifier_norms: vec![2.0, 2.0, 2.0],
                diffusion_norms: vec![1.0, 1.0, 1.0],
                scales: vec![1.0; 3],
            }],
        };
        let series = dispersion_stat(&log);
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].1, 0.0);
    }

    #[test]
    fn dispersion_hand_example() {
        let log = TrajectoryLog {
            region_count: 2,
            steps: vec![StepLog {
                t: 5,
                region_sizes: vec![2, 2],
                classifier_norms: vec![1.0, 3.0],
                diffusion_norms: vec![1.0, 1.0],
                scales: vec![1.0; 2],
            }],
        };
        let series = dispersion_stat(&log);
        assert!((series[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_log_has_no_curves() {
        let log = TrajectoryLog {
            region_count: 2,
            steps: vec![],
        };
        assert!(region_norm_curves(&log).is_err());
    }

    #[test]
    fn compare_on_degenerate_model_gives_equal_cvs() {
        let mut config = tiny_config();
        if let ModelSpec::Attention(arch) = &mut config.model {
            arch.attention_gain = 0.0;
        }
        config.steps = 5;
        let summary = compare_cfg_scfg(&config, 1).unwrap();
        assert_eq!(summary.fraction_scfg_lower, 0.0);
        for p in &summary.per_step {
            assert_eq!(p.cv_cfg_mean.to_bits(), p.cv_scfg_mean.to_bits());
        }
    }
}
