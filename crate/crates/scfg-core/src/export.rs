//! Plain-text exporters: PGM mask rasters, CSV index maps, trajectory and
//! comparison tables, and the per-pixel scale heat map.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::ScaleMap;
use crate::pipeline::{CompareSummary, TrajectoryLog};
use crate::segmentation::SegmentationMasks;

fn write_exclusive(path: &Path, contents: &str, force: bool) -> Result<()> {
    use std::io::Write;
    let mut file = if force {
        std::fs::File::create(path)?
    } else {
        std::fs::File::create_new(path)?
    };
    file.write_all(contents.as_bytes())?;
    Ok(())
}

/// Binary mask as an ASCII PGM (P2) raster, 255 inside the region.
pub fn render_pgm_mask(mask: &[bool], resolution: (usize, usize)) -> Result<String> {
    let (h, w) = resolution;
    if mask.len() != h * w {
        return Err(Error::shape(&[h * w], &[mask.len()]));
    }
    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(out, "{w} {h}");
    let _ = writeln!(out, "255");
    for y in 0..h {
        let row: Vec<&str> = (0..w)
            .map(|x| if mask[y * w + x] { "255" } else { "0" })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    Ok(out)
}

pub fn write_pgm_mask(
    path: &Path,
    mask: &[bool],
    resolution: (usize, usize),
    force: bool,
) -> Result<()> {
    write_exclusive(path, &render_pgm_mask(mask, resolution)?, force)
}

/// Patch-to-token index map as CSV, one row per grid row.
pub fn render_index_map_csv(masks: &SegmentationMasks) -> Result<String> {
    masks.validate_partition()?;
    let (h, w) = masks.resolution;
    let mut owner = vec![0usize; h * w];
    for (i, mask) in masks.masks.iter().enumerate() {
        for (s, &inside) in mask.iter().enumerate() {
            if inside {
                owner[s] = i;
            }
        }
    }
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| owner[y * w + x].to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    Ok(out)
}

pub fn write_index_map_csv(path: &Path, masks: &SegmentationMasks, force: bool) -> Result<()> {
    write_exclusive(path, &render_index_map_csv(masks)?, force)
}

/// The full per-step table: norm curves plus the applied per-region scales.
pub fn render_trajectory_csv(log: &TrajectoryLog) -> Result<String> {
    if log.steps.is_empty() {
        return Err(Error::parameter("trajectory log is empty"));
    }
    let r = log.region_count;
    let mut out = String::new();
    let mut header = vec!["step".to_string()];
    header.extend((0..r).map(|i| format!("classifier_norm_r{i}")));
    header.extend((0..r).map(|i| format!("diffusion_norm_r{i}")));
    header.extend((0..r).map(|i| format!("gamma_r{i}")));
    header.extend((0..r).map(|i| format!("size_r{i}")));
    let _ = writeln!(out, "{}", header.join(","));
    for s in &log.steps {
        let mut row = vec![s.t.to_string()];
        row.extend(s.classifier_norms.iter().map(|v| v.to_string()));
        row.extend(s.diffusion_norms.iter().map(|v| v.to_string()));
        row.extend(s.scales.iter().map(|v| v.to_string()));
        row.extend(s.region_sizes.iter().map(|v| v.to_string()));
        let _ = writeln!(out, "{}", row.join(","));
    }
    Ok(out)
}

pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog, force: bool) -> Result<()> {
    write_exclusive(path, &render_trajectory_csv(log)?, force)
}

/// Per-pixel scale heat map as CSV, one row per grid row.
pub fn render_scale_map_csv(scales: &ScaleMap, resolution: (usize, usize)) -> Result<String> {
    let (h, w) = resolution;
    if scales.per_pixel.len() != h * w {
        return Err(Error::shape(&[h * w], &[scales.per_pixel.len()]));
    }
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| scales.per_pixel[y * w + x].to_string())
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    Ok(out)
}

pub fn write_scale_map_csv(
    path: &Path,
    scales: &ScaleMap,
    resolution: (usize, usize),
    force: bool,
) -> Result<()> {
    write_exclusive(path, &render_scale_map_csv(scales, resolution)?, force)
}

/// Paired-comparison table: `step, cv_cfg_mean, cv_scfg_mean` rows followed by
/// one summary row `summary,<mean cfg>,<mean scfg>,<fraction scfg lower>`.
pub fn render_compare_csv(summary: &CompareSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "step,cv_cfg_mean,cv_scfg_mean");
    for p in &summary.per_step {
        let _ = writeln!(out, "{},{},{}", p.t, p.cv_cfg_mean, p.cv_scfg_mean);
    }
    let _ = writeln!(
        out,
        "summary,{},{},{}",
        summary.mean_cv_cfg, summary.mean_cv_scfg, summary.fraction_scfg_lower
    );
    out
}

pub fn write_compare_csv(path: &Path, summary: &CompareSummary, force: bool) -> Result<()> {
    write_exclusive(path, &render_compare_csv(summary), force)
}
