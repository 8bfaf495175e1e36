//! A training-free conditional denoiser built from fixed seeded projections.
//!
//! The point of this backbone is to emit structurally valid, input-dependent
//! self- and cross-attention maps at several resolutions so the segmentation
//! and guidance path can be exercised end to end; sample quality is a
//! non-goal. All weights are drawn once from the seed, so the forward pass is
//! a pure function of `(x, t, prompt)`.
//!
//! Three architectural choices give the backbone the qualitative behavior of
//! trained text-to-image attention stacks:
//!
//! * fixed positional features keep the token segmentation coherent between
//!   steps instead of reshuffling with the noise;
//! * every token owns a fixed latent-space direction, and its cross logits
//!   carry an alignment prior, so patches attend to tokens whose content they
//!   already carry;
//! * the noise prediction includes an alignment-gated token write, so a
//!   region's conditional signal strengthens (up to cosine saturation) as
//!   sampling pushes it along its token's guidance and stays weak where the
//!   guidance was weak.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{row_softmax, AttentionRecord, ProjectionSet};
use crate::error::{Error, Result};
use crate::latent::{
    block_mean_pool, block_replicate, from_patch_matrix, to_patch_matrix, LatentImage,
};
use crate::prompt::TextPrompt;
use crate::rng::derive_rng;

/// Architecture of the seeded denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Latent grid (H, W, Ch).
    pub latent: (usize, usize, usize),
    /// Patch grid of each attention layer, in forward order. Every grid must
    /// divide the latent grid; at least two distinct grids are required so
    /// the smallest-two fusion rule is well defined.
    pub layer_resolutions: Vec<(usize, usize)>,
    /// Width of the patch feature stream.
    pub feature_dim: usize,
    /// Token embedding width.
    pub text_dim: usize,
    /// Projection output width d.
    pub attn_dim: usize,
    pub heads: usize,
    /// Sinusoidal time columns appended to the features (even).
    pub time_features: usize,
    /// Multiplier on attention logits; 0 degenerates every map to uniform.
    pub attention_gain: f64,
    /// Strength of the fixed per-patch positional features mixed into the
    /// normalized stream before every attention layer.
    pub positional_strength: f64,
    /// Weight of the alignment-gated token write in the noise prediction.
    pub gate_strength: f64,
    /// Spread of the per-token baseline gains of the gated write; 0 gives
    /// every token the same intrinsic strength.
    pub token_gain_spread: f64,
    /// Weight of the alignment prior added to the cross logits (scaled by
    /// `attention_gain` like the dot-product term).
    pub alignment_bias: f64,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w, ch) = self.latent;
        if h == 0 || w == 0 || ch == 0 {
            return Err(Error::config("latent dimensions must be positive"));
        }
        if self.layer_resolutions.len() < 2 {
            return Err(Error::config("need at least two attention layers"));
        }
        let mut distinct: Vec<(usize, usize)> = self.layer_resolutions.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::config(
                "need attention layers at >= 2 distinct resolutions; the smallest-two fusion rule is undefined otherwise",
            ));
        }
        for &(lh, lw) in &self.layer_resolutions {
            if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 {
                return Err(Error::config(format!(
                    "layer grid {lh}x{lw} does not divide the latent grid {h}x{w}"
                )));
            }
        }
        if self.feature_dim == 0 || self.text_dim == 0 || self.attn_dim == 0 || self.heads == 0 {
            return Err(Error::config(
                "feature/text/attention dims and heads must be >= 1",
            ));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::config("time_features must be even (sin/cos pairs)"));
        }
        Ok(())
    }

    /// The fixed desk-scale scenario used by the default run config.
    pub fn standard_toy() -> Self {
        Self {
            latent: (16, 16, 8),
            layer_resolutions: vec![(16, 16), (8, 8), (8, 8), (4, 4)],
            feature_dim: 16,
            text_dim: 16,
            attn_dim: 16,
            heads: 2,
            time_features: 8,
            attention_gain: 2.0,
            positional_strength: 1.0,
            gate_strength: 2.0,
            token_gain_spread: 0.5,
            alignment_bias: 1.0,
        }
    }
}

/// Noise prediction plus the attention maps of every layer.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_pred: ndarray::Array3<f64>,
    pub records: Vec<AttentionRecord>,
}

struct LayerWeights {
    heads: Vec<ProjectionSet>,
}

/// The seeded attention denoiser. Construction draws every projection from
/// the seed in a fixed order; `forward` never touches an RNG.
pub struct SeededDenoiser {
    config: ArchitectureConfig,
    patch_embed: Array2<f64>,
    output_proj: Array2<f64>,
    /// Positional features pooled to each layer's grid.
    layer_positions: Vec<Array2<f64>>,
    /// Maps token embeddings to their latent-space directions.
    token_direction_map: Array2<f64>,
    /// Projects token embeddings onto the baseline-gain axis.
    token_gain_axis: Array1<f64>,
    layers: Vec<LayerWeights>,
}

fn draw_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

impl SeededDenoiser {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, w, ch) = config.latent;
        let f = config.feature_dim;
        let d = config.attn_dim;
        let aug = f + config.time_features;
        let mut rng = derive_rng(seed, "denoiser-weights", 0);

        let patch_embed = draw_matrix(&mut rng, ch, f, 1.0 / (ch as f64).sqrt());
        let output_proj = draw_matrix(&mut rng, f, ch, 1.0 / (f as f64).sqrt());
        let positions = draw_matrix(&mut rng, h * w, f, 1.0);
        let layer_positions = config
            .layer_resolutions
            .iter()
            .map(|&grid| block_mean_pool(&positions, (h, w), grid))
            .collect::<Result<Vec<_>>>()?;
        let token_direction_map = draw_matrix(
            &mut rng,
            config.text_dim,
            ch,
            1.0 / (config.text_dim as f64).sqrt(),
        );
        let token_gain_axis = Array1::from_shape_simple_fn(config.text_dim, || {
            rng.sample::<f64, _>(StandardNormal) / (config.text_dim as f64).sqrt()
        });

        let mut layers = Vec::with_capacity(config.layer_resolutions.len());
        for _ in &config.layer_resolutions {
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                let sf = 1.0 / (aug as f64).sqrt();
                let st = 1.0 / (config.text_dim as f64).sqrt();
                let sd = 1.0 / (d as f64).sqrt();
                heads.push(ProjectionSet {
                    query_self: draw_matrix(&mut rng, aug, d, sf),
                    key_self: draw_matrix(&mut rng, aug, d, sf),
                    value_self: draw_matrix(&mut rng, aug, d, sf),
                    out_self: draw_matrix(&mut rng, d, aug, sd),
                    query_cross: draw_matrix(&mut rng, aug, d, sf),
                    key_cross: draw_matrix(&mut rng, config.text_dim, d, st),
                    value_cross: draw_matrix(&mut rng, config.text_dim, d, st),
                    out_cross: draw_matrix(&mut rng, d, aug, sd),
                    logit_gain: config.attention_gain,
                });
            }
            layers.push(LayerWeights { heads });
        }
        Ok(Self {
            config,
            patch_embed,
            output_proj,
            layer_positions,
            token_direction_map,
            token_gain_axis,
            layers,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    fn time_columns(&self, t: usize, rows: usize) -> Array2<f64> {
        let n = self.config.time_features;
        let mut cols = Array2::zeros((rows, n));
        for j in 0..n / 2 {
            let omega = 1.0 / 10_000f64.powf(2.0 * j as f64 / n as f64);
            let phase = omega * t as f64;
            let (s, c) = phase.sin_cos();
            for r in 0..rows {
                cols[[r, 2 * j]] = s;
                cols[[r, 2 * j + 1]] = c;
            }
        }
        cols
    }

    /// Orthonormalized latent directions, one per token, plus the per-token
    /// baseline gains of the gated write.
    fn token_geometry(&self, prompt: &TextPrompt) -> (Array2<f64>, Vec<f64>) {
        let raw = prompt.embeddings.dot(&self.token_direction_map);
        let directions = gram_schmidt_rows(&raw);
        let gains: Vec<f64> = prompt
            .embeddings
            .rows()
            .into_iter()
            .map(|e| 1.0 + 0.5 * self.config.token_gain_spread * e.dot(&self.token_gain_axis).tanh())
            .collect();
        (directions, gains)
    }

    pub fn forward(&self, x: &LatentImage, t: usize, prompt: &TextPrompt) -> Result<DenoiserOutput> {
        let (h, w, ch) = self.config.latent;
        if x.data.dim() != (h, w, ch) {
            let (a, b, c) = x.data.dim();
            return Err(Error::shape(&[h, w, ch], &[a, b, c]));
        }
        if prompt.embedding_dim() != self.config.text_dim {
            return Err(Error::shape(
                &[prompt.len(), self.config.text_dim],
                &[prompt.len(), prompt.embedding_dim()],
            ));
        }
        let f = self.config.feature_dim;
        let x_flat = to_patch_matrix(&x.data);
        let mut stream = x_flat.dot(&self.patch_embed);

        let (token_directions, token_gains) = self.token_geometry(prompt);
        // Per-patch alignment cosines against every token direction.
        let alignment = unit_normalize_rows(&x_flat).dot(&token_directions.t());

        let mut records = Vec::with_capacity(self.layers.len());
        let mut gated = Array2::zeros((h * w, ch));
        for (k, layer) in self.layers.iter().enumerate() {
            let grid = self.config.layer_resolutions[k];
            let pooled = block_mean_pool(&stream, (h, w), grid)?;
            let mut normed = rms_normalize_rows(&pooled);
            if self.config.positional_strength != 0.0 {
                normed += &self
                    .layer_positions[k]
                    .mapv(|v| v * self.config.positional_strength);
            }
            let z_aug = append_columns(&normed, &self.time_columns(t, normed.nrows()));
            let alignment_k = block_mean_pool(&alignment, (h, w), grid)?;
            // Alignment prior on the cross logits, scaled with the gain so
            // a zero gain still degenerates every map to uniform.
            let cross_bias = alignment_k
                .mapv(|v| v * self.config.attention_gain * self.config.alignment_bias);

            let hw = grid.0 * grid.1;
            let mut delta = Array2::zeros((hw, f));
            let mut self_sum = Array2::zeros((hw, hw));
            let mut cross_sum = Array2::zeros((hw, prompt.len()));
            for head in &layer.heads {
                let scale = head.logit_gain / (head.attn_dim() as f64).sqrt();

                let q_s = z_aug.dot(&head.query_self);
                let k_s = z_aug.dot(&head.key_self);
                let self_map = row_softmax(&q_s.dot(&k_s.t()).mapv(|v| v * scale));

                let q_c = z_aug.dot(&head.query_cross);
                let k_c = prompt.embeddings.dot(&head.key_cross);
                let cross_logits = q_c.dot(&k_c.t()).mapv(|v| v * scale) + &cross_bias;
                let cross_map = row_softmax(&cross_logits);

                let v_s = z_aug.dot(&head.value_self);
                let self_delta = self_map.dot(&v_s).dot(&head.out_self);
                let v_c = prompt.embeddings.dot(&head.value_cross);
                let cross_delta = cross_map.dot(&v_c).dot(&head.out_cross);

                delta += &(&self_delta + &cross_delta).slice(ndarray::s![.., ..f]);
                self_sum += &self_map;
                cross_sum += &cross_map;
            }
            let inv_heads = 1.0 / layer.heads.len() as f64;
            let cross_avg = cross_sum.mapv(|v| v * inv_heads);

            if self.config.gate_strength != 0.0 {
                // Attention-weighted, alignment-gated token write in latent
                // space: (C . (b + A)) G at this layer's grid.
                let mut gate = alignment_k;
                for (i, &b) in token_gains.iter().enumerate() {
                    gate.column_mut(i).mapv_inplace(|v| b + v);
                }
                let write = (&cross_avg * &gate).dot(&token_directions);
                gated += &block_replicate(&write, grid, (h, w))?;
            }

            records.push(AttentionRecord {
                layer_index: k,
                resolution: grid,
                self_attn: self_sum.mapv(|v| v * inv_heads),
                cross_attn: cross_avg,
                heads: layer.heads.len(),
            });
            stream += &block_replicate(&delta, grid, (h, w))?;
        }

        let mut eps_flat = rms_normalize_rows(&stream).dot(&self.output_proj);
        if self.config.gate_strength != 0.0 {
            let scale = self.config.gate_strength / self.layers.len() as f64;
            eps_flat -= &gated.mapv(|v| v * scale);
        }
        let eps_pred = from_patch_matrix(&eps_flat, (h, w))?;
        Ok(DenoiserOutput { eps_pred, records })
    }
}

/// One-shot convenience wrapper: build the weights from the seed and run a
/// single forward pass.
pub fn seeded_denoiser(
    x: &LatentImage,
    t: usize,
    prompt: &TextPrompt,
    seed: u64,
    config: &ArchitectureConfig,
) -> Result<DenoiserOutput> {
    SeededDenoiser::new(config.clone(), seed)?.forward(x, t, prompt)
}

fn rms_normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + 1e-12).sqrt();
        row.mapv_inplace(|v| v / rms);
    }
    out
}

fn unit_normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Row-wise Gram-Schmidt with unit normalization. Rows beyond the ambient
/// dimension (or linearly dependent ones) keep their normalized residual
/// direction.
fn gram_schmidt_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    let rows = out.nrows();
    for i in 0..rows {
        for j in 0..i {
            let prev = out.row(j).to_owned();
            let proj = out.row(i).dot(&prev);
            let mut row = out.row_mut(i);
            for (a, b) in row.iter_mut().zip(prev.iter()) {
                *a -= proj * b;
            }
        }
        let norm = (out.row(i).iter().map(|v| v * v).sum::<f64>()).sqrt();
        let mut row = out.row_mut(i);
        if norm > 1e-9 {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(0.0);
        }
    }
    out
}

fn append_columns(m: &Array2<f64>, extra: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[m.view(), extra.view()])
        .expect("row counts match by construction")
}
