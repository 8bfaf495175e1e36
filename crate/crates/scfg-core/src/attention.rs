//! The attention primitive of the seeded denoiser: scaled dot-product
//! self- and cross-attention over linear projections, returning the maps
//! exactly as used for mixing.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// One layer's head-averaged attention maps plus grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    /// Patch grid (h, w) of this layer; `self_attn` is (h*w, h*w).
    pub resolution: (usize, usize),
    pub self_attn: Array2<f64>,
    pub cross_attn: Array2<f64>,
    pub heads: usize,
}

impl AttentionRecord {
    pub fn patch_count(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn token_count(&self) -> usize {
        self.cross_attn.ncols()
    }

    /// Check shapes and row-stochasticity of both maps.
    pub fn validate(&self) -> Result<()> {
        let hw = self.patch_count();
        if self.self_attn.dim() != (hw, hw) {
            return Err(Error::shape(&[hw, hw], &[self.self_attn.nrows(), self.self_attn.ncols()]));
        }
        if self.cross_attn.nrows() != hw {
            return Err(Error::shape(
                &[hw, self.cross_attn.ncols()],
                &[self.cross_attn.nrows(), self.cross_attn.ncols()],
            ));
        }
        check_row_stochastic(&self.self_attn, 1e-6, "self-attention")?;
        check_row_stochastic(&self.cross_attn, 1e-6, "cross-attention")?;
        Ok(())
    }
}

pub(crate) fn check_row_stochastic(m: &Array2<f64>, tol: f64, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            if v < 0.0 {
                return Err(Error::contract(format!(
                    "{what} row {i} holds negative entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::contract(format!(
                "{what} row {i} sums to {sum}, expected 1 within {tol}"
            )));
        }
    }
    Ok(())
}

/// Query/key/value/output projections for one attention head. Queries come
/// from the image features; the `*_cross` key/value side projects the text
/// embeddings. Output projections return value mixes to the feature width so
/// the residual connections type-check.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub query_self: Array2<f64>,
    pub key_self: Array2<f64>,
    pub value_self: Array2<f64>,
    pub out_self: Array2<f64>,
    pub query_cross: Array2<f64>,
    pub key_cross: Array2<f64>,
    pub value_cross: Array2<f64>,
    pub out_cross: Array2<f64>,
    /// Multiplier on both logit matrices before softmax; 0 gives uniform maps.
    pub logit_gain: f64,
}

impl ProjectionSet {
    pub fn attn_dim(&self) -> usize {
        self.query_self.ncols()
    }

    fn validate(&self, feature_width: usize, text_width: usize) -> Result<()> {
        let d = self.attn_dim();
        let checks: [(&str, &Array2<f64>, (usize, usize)); 8] = [
            ("query_self", &self.query_self, (feature_width, d)),
            ("key_self", &self.key_self, (feature_width, d)),
            ("value_self", &self.value_self, (feature_width, d)),
            ("out_self", &self.out_self, (d, feature_width)),
            ("query_cross", &self.query_cross, (feature_width, d)),
            ("key_cross", &self.key_cross, (text_width, d)),
            ("value_cross", &self.value_cross, (text_width, d)),
            ("out_cross", &self.out_cross, (d, feature_width)),
        ];
        for (name, m, want) in checks {
            if m.dim() != want {
                return Err(Error::config(format!(
                    "projection {name} has shape {:?}, expected {want:?}",
                    m.dim()
                )));
            }
        }
        if d == 0 {
            return Err(Error::config("attention dim must be >= 1"));
        }
        Ok(())
    }
}

/// Numerically stable row softmax.
pub fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// One attention block: self-attention over the patch features, then
/// cross-attention against the text embeddings, each added back through a
/// residual connection. Returns the block output and the two maps exactly as
/// used.
pub fn attention_block_forward(
    z: &Array2<f64>,
    text: &Array2<f64>,
    weights: &ProjectionSet,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    weights.validate(z.ncols(), text.ncols())?;
    let d = weights.attn_dim();
    let scale = weights.logit_gain / (d as f64).sqrt();

    let q_s = z.dot(&weights.query_self);
    let k_s = z.dot(&weights.key_self);
    let self_logits = q_s.dot(&k_s.t()).mapv(|v| v * scale);
    let self_map = row_softmax(&self_logits);

    let q_c = z.dot(&weights.query_cross);
    let k_c = text.dot(&weights.key_cross);
    let cross_logits = q_c.dot(&k_c.t()).mapv(|v| v * scale);
    let cross_map = row_softmax(&cross_logits);

    let v_s = z.dot(&weights.value_self);
    let z_mid = z + &self_map.dot(&v_s).dot(&weights.out_self);
    let v_c = text.dot(&weights.value_cross);
    let z_out = &z_mid + &cross_map.dot(&v_c).dot(&weights.out_cross);

    Ok((z_out, self_map, cross_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::derive_rng;

    fn random_weights(feature: usize, text: usize, d: usize, gain: f64) -> ProjectionSet {
        let mut rng = derive_rng(99, "test-proj", 0);
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let sf = 1.0 / (feature as f64).sqrt();
        let st = 1.0 / (text as f64).sqrt();
        let sd = 1.0 / (d as f64).sqrt();
        ProjectionSet {
            query_self: draw(feature, d, sf),
            key_self: draw(feature, d, sf),
            value_self: draw(feature, d, sf),
            out_self: draw(d, feature, sd),
            query_cross: draw(feature, d, sf),
            key_cross: draw(text, d, st),
            value_cross: draw(text, d, st),
            out_cross: draw(d, feature, sd),
            logit_gain: gain,
        }
    }

    #[test]
    fn identical_rows_give_identical_attention_rows() {
        let z = Array2::from_elem((3, 4), 0.7);
        let text = array![[1.0, 0.0], [0.0, 1.0]];
        let w = random_weights(4, 2, 5, 1.0);
        let (_, s, c) = attention_block_forward(&z, &text, &w).unwrap();
        for i in 1..3 {
            assert_eq!(s.row(0), s.row(i));
            assert_eq!(c.row(0), c.row(i));
        }
    }

    #[test]
    fn zero_gain_gives_uniform_maps() {
        let mut rng = derive_rng(1, "test-z", 0);
        let z = Array2::from_shape_simple_fn((4, 3), || rng.sample::<f64, _>(StandardNormal));
        let text = Array2::from_shape_simple_fn((5, 2), || rng.sample::<f64, _>(StandardNormal));
        let w = random_weights(3, 2, 4, 0.0);
        let (_, s, c) = attention_block_forward(&z, &text, &w).unwrap();
        for v in s.iter() {
            assert_relative_eq!(*v, 0.25, max_relative = 1e-12);
        }
        for v in c.iter() {
            assert_relative_eq!(*v, 0.2, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_of_known_logits() {
        // Two patches, two tokens, logits [[ln2, 0], [0, ln2]].
        let logits = array![[2f64.ln(), 0.0], [0.0, 2f64.ln()]];
        let c = row_softmax(&logits);
        assert_relative_eq!(c[[0, 0]], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(c[[0, 1]], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(c[[1, 0]], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(c[[1, 1]], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn maps_are_row_stochastic() {
        let mut rng = derive_rng(2, "test-stoch", 0);
        let z = Array2::from_shape_simple_fn((6, 4), || 3.0 * rng.sample::<f64, _>(StandardNormal));
        let text = Array2::from_shape_simple_fn((3, 2), || rng.sample::<f64, _>(StandardNormal));
        let w = random_weights(4, 2, 4, 2.0);
        let (_, s, c) = attention_block_forward(&z, &text, &w).unwrap();
        check_row_stochastic(&s, 1e-6, "self").unwrap();
        check_row_stochastic(&c, 1e-6, "cross").unwrap();
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let z = Array2::zeros((3, 4));
        let text = Array2::zeros((2, 3));
        let w = random_weights(4, 2, 5, 1.0); // text width 2, fed width 3
        assert!(attention_block_forward(&z, &text, &w).is_err());
    }
}
