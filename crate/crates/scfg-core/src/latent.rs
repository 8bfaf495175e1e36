//! The latent image tensor and small patch-grid helpers shared by the
//! denoiser and the guidance path.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A latent image on an `(H, W, Ch)` patch grid together with its diffusion
/// time. `step == 0` is the clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub data: Array3<f64>,
    pub step: usize,
}

impl LatentImage {
    pub fn new(data: Array3<f64>, step: usize) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::parameter("latent entries must be finite"));
        }
        Ok(Self { data, step })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn patch_count(&self) -> usize {
        let (h, w, _) = self.data.dim();
        h * w
    }
}

/// Draw an `(H, W, Ch)` tensor of standard normal entries.
pub fn standard_normal(dim: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Flatten `(H, W, Ch)` to the `(HW, Ch)` patch matrix, row-major over the
/// grid (patch index `s = y*W + x`).
pub fn to_patch_matrix(data: &Array3<f64>) -> Array2<f64> {
    let (h, w, ch) = data.dim();
    data.to_shape((h * w, ch))
        .expect("standard-layout latent reshapes losslessly")
        .to_owned()
}

/// Inverse of [`to_patch_matrix`].
pub fn from_patch_matrix(m: &Array2<f64>, resolution: (usize, usize)) -> Result<Array3<f64>> {
    let (rows, ch) = m.dim();
    let (h, w) = resolution;
    if rows != h * w {
        return Err(Error::shape(&[h * w, ch], &[rows, ch]));
    }
    Ok(m.to_shape((h, w, ch))
        .expect("row count checked against the grid")
        .to_owned())
}

/// Per-patch 2-norm over channels, flattened row-major.
pub fn channel_norms(data: &Array3<f64>) -> Array1<f64> {
    let m = to_patch_matrix(data);
    Array1::from_iter(m.rows().into_iter().map(|row| {
        row.iter().map(|v| v * v).sum::<f64>().sqrt()
    }))
}

fn check_divisible(fine: (usize, usize), coarse: (usize, usize)) -> Result<(usize, usize)> {
    let (fh, fw) = fine;
    let (ch, cw) = coarse;
    if ch == 0 || cw == 0 || fh % ch != 0 || fw % cw != 0 {
        return Err(Error::parameter(format!(
            "grid {fh}x{fw} is not an integer multiple of {ch}x{cw}"
        )));
    }
    Ok((fh / ch, fw / cw))
}

/// Mean-pool a patch-feature matrix from a fine grid onto a coarser grid that
/// divides it.
pub fn block_mean_pool(
    features: &Array2<f64>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Array2<f64>> {
    let (fy, fx) = check_divisible(from, to)?;
    let (rows, cols) = features.dim();
    if rows != from.0 * from.1 {
        return Err(Error::shape(&[from.0 * from.1, cols], &[rows, cols]));
    }
    let mut out = Array2::zeros((to.0 * to.1, cols));
    let norm = 1.0 / (fy * fx) as f64;
    for cy in 0..to.0 {
        for cx in 0..to.1 {
            let target = cy * to.1 + cx;
            for dy in 0..fy {
                for dx in 0..fx {
                    let source = (cy * fy + dy) * from.1 + (cx * fx + dx);
                    for c in 0..cols {
                        out[[target, c]] += features[[source, c]];
                    }
                }
            }
            for c in 0..cols {
                out[[target, c]] *= norm;
            }
        }
    }
    Ok(out)
}

/// Replicate a coarse patch-feature matrix onto a finer grid (nearest
/// neighbor along the patch grid).
pub fn block_replicate(
    features: &Array2<f64>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Array2<f64>> {
    let (fy, fx) = check_divisible(to, from)?;
    let (rows, cols) = features.dim();
    if rows != from.0 * from.1 {
        return Err(Error::shape(&[from.0 * from.1, cols], &[rows, cols]));
    }
    let mut out = Array2::zeros((to.0 * to.1, cols));
    for y in 0..to.0 {
        for x in 0..to.1 {
            let source = (y / fy) * from.1 + (x / fx);
            let target = y * to.1 + x;
            for c in 0..cols {
                out[[target, c]] = features[[source, c]];
            }
        }
    }
    Ok(out)
}
