//! Training-free semantic segmentation of the latent image from attention
//! records: per-layer self-attention propagation, fusion over the two
//! smallest resolutions, spatial renormalization with argmax assignment, and
//! foreground extraction from the START-token region.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};

/// Cross-attention fused across layers at the working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCrossAttention {
    /// Row-stochastic (HW, L) map at `resolution`.
    pub map: Array2<f64>,
    pub resolution: (usize, usize),
    pub source_layers: Vec<usize>,
}

/// Binary per-token region masks partitioning a patch grid, plus the
/// benchmark mask used to anchor adaptive scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMasks {
    pub masks: Vec<Vec<bool>>,
    pub benchmark: Vec<bool>,
    pub resolution: (usize, usize),
}

impl SegmentationMasks {
    pub fn token_count(&self) -> usize {
        self.masks.len()
    }

    pub fn patch_count(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn cardinality(&self, region: usize) -> usize {
        self.masks[region].iter().filter(|&&b| b).count()
    }

    pub fn benchmark_cardinality(&self) -> usize {
        self.benchmark.iter().filter(|&&b| b).count()
    }

    /// Every patch belongs to exactly one region.
    pub fn validate_partition(&self) -> Result<()> {
        let hw = self.patch_count();
        if self.benchmark.len() != hw {
            return Err(Error::shape(&[hw], &[self.benchmark.len()]));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != hw {
                return Err(Error::contract(format!(
                    "mask {i} has {} entries, grid has {hw}"
                , m.len())));
            }
        }
        for s in 0..hw {
            let owners = self.masks.iter().filter(|m| m[s]).count();
            if owners != 1 {
                return Err(Error::contract(format!(
                    "patch {s} belongs to {owners} regions, expected exactly 1"
                )));
            }
        }
        Ok(())
    }

    /// Nearest-neighbor upsampling of every mask and the benchmark to a finer
    /// grid.
    pub fn upsample(&self, target: (usize, usize)) -> Result<SegmentationMasks> {
        let masks = self
            .masks
            .iter()
            .map(|m| upsample_mask(m, self.resolution, target))
            .collect::<Result<Vec<_>>>()?;
        let benchmark = upsample_mask(&self.benchmark, self.resolution, target)?;
        Ok(SegmentationMasks {
            masks,
            benchmark,
            resolution: target,
        })
    }
}

/// Average the first `steps` self-attention powers applied to the
/// cross-attention map: `(1/R) * sum_{r=1..R} S^r C`, accumulated by iterated
/// multiplication.
pub fn refine_with_self_attention(
    cross: &Array2<f64>,
    self_attn: &Array2<f64>,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::parameter("propagation steps must be >= 1"));
    }
    let hw = cross.nrows();
    if self_attn.dim() != (hw, hw) {
        return Err(Error::shape(&[hw, hw], &[self_attn.nrows(), self_attn.ncols()]));
    }
    let mut propagated = self_attn.dot(cross);
    let mut total = propagated.clone();
    for _ in 1..steps {
        propagated = self_attn.dot(&propagated);
        total += &propagated;
    }
    Ok(total.mapv(|v| v / steps as f64))
}

/// Sort key for "smallest resolution": patch count, then grid dims for
/// determinism between equal-area grids.
fn resolution_key(res: (usize, usize)) -> (usize, usize, usize) {
    (res.0 * res.1, res.0, res.1)
}

/// Fuse cross-attention maps over the layers at the two smallest resolutions
/// present: optionally propagate each through its own self-attention map,
/// upsample to the working resolution (the larger of the two), and average.
pub fn fuse_attention(
    records: &[AttentionRecord],
    refine: bool,
    propagation_steps: usize,
) -> Result<FusedCrossAttention> {
    if records.is_empty() {
        return Err(Error::parameter("cannot fuse an empty record list"));
    }
    let tokens = records[0].token_count();
    for r in records {
        if r.token_count() != tokens {
            return Err(Error::shape(
                &[r.patch_count(), tokens],
                &[r.patch_count(), r.token_count()],
            ));
        }
    }

    let mut resolutions: Vec<(usize, usize)> = records.iter().map(|r| r.resolution).collect();
    resolutions.sort_unstable_by_key(|&r| resolution_key(r));
    resolutions.dedup();
    let kept: Vec<(usize, usize)> = resolutions.into_iter().take(2).collect();
    let working = *kept.last().expect("at least one resolution present");

    let mut sum: Option<Array2<f64>> = None;
    let mut source_layers = Vec::new();
    let mut count = 0usize;
    for r in records {
        if !kept.contains(&r.resolution) {
            continue;
        }
        let map = if refine {
            refine_with_self_attention(&r.cross_attn, &r.self_attn, propagation_steps)?
        } else {
            r.cross_attn.clone()
        };
        let up = upsample_rows(&map, r.resolution, working)?;
        sum = Some(match sum {
            None => up,
            Some(acc) => acc + &up,
        });
        source_layers.push(r.layer_index);
        count += 1;
    }
    let map = sum
        .expect("the two smallest resolutions always match at least one record")
        .mapv(|v| v / count as f64);
    Ok(FusedCrossAttention {
        map,
        resolution: working,
        source_layers,
    })
}

/// Replicate the rows of a per-patch matrix from a coarse grid to a finer
/// grid (nearest neighbor along the patch grid).
fn upsample_rows(
    map: &Array2<f64>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Array2<f64>> {
    if from == to {
        return Ok(map.clone());
    }
    crate::latent::block_replicate(map, from, to)
}

/// Renormalize along the spatial dimension: each column of the result sums
/// to 1. A column with zero mass (a token no patch attends to) is replaced by
/// a uniform column with a logged warning rather than aborting.
pub fn renormalize_spatial(fused: &FusedCrossAttention) -> Result<Array2<f64>> {
    let (hw, tokens) = fused.map.dim();
    if hw == 0 || tokens == 0 {
        return Err(Error::parameter("cannot renormalize an empty map"));
    }
    let mut out = fused.map.clone();
    for i in 0..tokens {
        let total: f64 = out.column(i).sum();
        if total <= 0.0 {
            log::warn!("token column {i} carries zero attention mass; substituting uniform");
            let uniform = 1.0 / hw as f64;
            out.column_mut(i).fill(uniform);
        } else {
            out.column_mut(i).mapv_inplace(|v| v / total);
        }
    }
    Ok(out)
}

/// Assign each patch to the token with the largest renormalized attention,
/// ties broken toward the lowest token index. The masks partition the grid.
pub fn assign_patches(c_hat: &Array2<f64>, resolution: (usize, usize)) -> Result<SegmentationMasks> {
    let (hw, tokens) = c_hat.dim();
    if hw != resolution.0 * resolution.1 {
        return Err(Error::shape(&[resolution.0 * resolution.1, tokens], &[hw, tokens]));
    }
    if tokens == 0 {
        return Err(Error::parameter("need at least one token column"));
    }
    if !c_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::parameter("renormalized map must be finite"));
    }
    let mut masks = vec![vec![false; hw]; tokens];
    for s in 0..hw {
        let mut best = 0usize;
        let mut best_value = c_hat[[s, 0]];
        for i in 1..tokens {
            if c_hat[[s, i]] > best_value {
                best_value = c_hat[[s, i]];
                best = i;
            }
        }
        masks[best][s] = true;
    }
    Ok(SegmentationMasks {
        masks,
        benchmark: vec![true; hw],
        resolution,
    })
}

/// How the benchmark region is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    /// Complement of the START-token region of the unconditional pass.
    Foreground,
    /// Every patch; the benchmark is the image-wide mean.
    Mean,
}

/// The benchmark mask. Foreground mode complements the START-token region;
/// when that complement is empty the mask falls back to all ones with a
/// logged warning.
pub fn foreground_mask(
    masks: &SegmentationMasks,
    start_index: usize,
    mode: BenchmarkMode,
) -> Result<Vec<bool>> {
    let hw = masks.patch_count();
    match mode {
        BenchmarkMode::Mean => Ok(vec![true; hw]),
        BenchmarkMode::Foreground => {
            if start_index >= masks.token_count() {
                return Err(Error::parameter(format!(
                    "start index {start_index} outside {} tokens",
                    masks.token_count()
                )));
            }
            let complement: Vec<bool> = masks.masks[start_index].iter().map(|&b| !b).collect();
            if complement.iter().any(|&b| b) {
                Ok(complement)
            } else {
                log::warn!(
                    "START region covers every patch; falling back to the all-ones benchmark"
                );
                Ok(vec![true; hw])
            }
        }
    }
}

/// Nearest-neighbor block replication of a binary mask onto a finer grid.
/// Cardinality scales by exactly (H/h)*(W/w).
pub fn upsample_mask(
    mask: &[bool],
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Vec<bool>> {
    let (fh, fw) = from;
    let (th, tw) = to;
    if mask.len() != fh * fw {
        return Err(Error::shape(&[fh * fw], &[mask.len()]));
    }
    if fh == 0 || fw == 0 || th % fh != 0 || tw % fw != 0 {
        return Err(Error::parameter(format!(
            "target grid {th}x{tw} is not an integer multiple of {fh}x{fw}"
        )));
    }
    let (sy, sx) = (th / fh, tw / fw);
    let mut out = vec![false; th * tw];
    for y in 0..th {
        for x in 0..tw {
            out[y * tw + x] = mask[(y / sy) * fw + (x / sx)];
        }
    }
    Ok(out)
}

/// The full segmentation path for one pass: propagate, fuse, renormalize,
/// assign.
pub fn segment_records(
    records: &[AttentionRecord],
    refine: bool,
    propagation_steps: usize,
) -> Result<SegmentationMasks> {
    let fused = fuse_attention(records, refine, propagation_steps)?;
    let normalized = renormalize_spatial(&fused)?;
    assign_patches(&normalized, fused.resolution)
}
