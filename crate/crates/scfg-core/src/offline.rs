//! Offline segmentation: load one step's attention dump written by an
//! external pipeline (or this crate) and compute masks without running a
//! model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::attention::AttentionRecord;
use crate::container::{parse_dump_filename, read_container, AttentionKind, PassKind};
use crate::error::{Error, Result};
use crate::export::{write_index_map_csv, write_pgm_mask};
use crate::segmentation::{foreground_mask, segment_records, BenchmarkMode, SegmentationMasks};

/// One step's attention records grouped by pass.
#[derive(Debug, Default)]
pub struct AttentionDump {
    pub cond: Vec<AttentionRecord>,
    pub uncond: Vec<AttentionRecord>,
}

/// Row sums drift through f32 storage; rows are renormalized on load after a
/// sanity check at this tolerance.
const LOAD_ROW_SUM_TOL: f64 = 1e-3;

fn renormalize_rows(m: &mut Array2<f64>, file: &str, problems: &mut Vec<String>) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let mut sum = 0.0;
        let mut negative = false;
        for &v in row.iter() {
            if v < 0.0 {
                negative = true;
            }
            sum += v;
        }
        if negative || (sum - 1.0).abs() > LOAD_ROW_SUM_TOL {
            problems.push(format!(
                "{file}: row {i} is not a probability row (sum {sum})"
            ));
            return;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Load `layer<k>_<self|cross>_<cond|uncond>.bin` containers from a
/// directory. Inconsistent or incomplete stacks produce a validation error
/// listing every offending file.
pub fn load_attention_dump(dir: &Path) -> Result<AttentionDump> {
    if !dir.is_dir() {
        return Err(Error::Validation(vec![format!(
            "{} is not a directory",
            dir.display()
        )]));
    }
    let mut names: Vec<(PathBuf, usize, AttentionKind, PassKind)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((layer, kind, pass)) = parse_dump_filename(&name) {
            names.push((entry.path(), layer, kind, pass));
        }
    }
    if names.is_empty() {
        return Err(Error::Validation(vec![format!(
            "{} holds no layer<k>_<self|cross>_<cond|uncond>.bin files",
            dir.display()
        )]));
    }

    #[derive(Default)]
    struct Slot {
        self_attn: Option<Array2<f64>>,
        cross_attn: Option<Array2<f64>>,
        resolution: (usize, usize),
    }

    let mut problems: Vec<String> = Vec::new();
    let mut table: BTreeMap<(PassKind, usize), Slot> = BTreeMap::new();

    for (path, layer, kind, pass) in names {
        let file = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (tensor, meta) = match read_container(&path) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("{file}: {e}"));
                continue;
            }
        };
        if tensor.ndim() != 2 {
            problems.push(format!(
                "{file}: expected a rank-2 map, got rank {}",
                tensor.ndim()
            ));
            continue;
        }
        let rows = tensor.shape()[0];
        let resolution = match meta.resolution() {
            Some(r) => r,
            None => {
                problems.push(format!("{file}: missing resolution metadata"));
                continue;
            }
        };
        if resolution.0 * resolution.1 != rows {
            problems.push(format!(
                "{file}: resolution {}x{} does not match {rows} rows",
                resolution.0, resolution.1
            ));
            continue;
        }
        let mut map = tensor
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank checked above")
            .mapv(f64::from);
        renormalize_rows(&mut map, &file, &mut problems);

        let slot = table.entry((pass, layer)).or_default();
        slot.resolution = resolution;
        match kind {
            AttentionKind::SelfAttn => {
                if map.ncols() != rows {
                    problems.push(format!("{file}: self-attention map must be square"));
                    continue;
                }
                slot.self_attn = Some(map);
            }
            AttentionKind::Cross => slot.cross_attn = Some(map),
        }
    }

    let mut dump = AttentionDump::default();
    let mut token_counts: Vec<usize> = Vec::new();
    for ((pass, layer), slot) in table {
        match (slot.self_attn, slot.cross_attn) {
            (Some(s), Some(c)) => {
                token_counts.push(c.ncols());
                let record = AttentionRecord {
                    layer_index: layer,
                    resolution: slot.resolution,
                    self_attn: s,
                    cross_attn: c,
                    heads: 1,
                };
                match pass {
                    PassKind::Cond => dump.cond.push(record),
                    PassKind::Uncond => dump.uncond.push(record),
                }
            }
            (None, Some(_)) => problems.push(format!(
                "layer{layer}_self_{}.bin is missing",
                pass.label()
            )),
            (Some(_), None) => problems.push(format!(
                "layer{layer}_cross_{}.bin is missing",
                pass.label()
            )),
            (None, None) => {}
        }
    }
    token_counts.dedup();
    if token_counts.len() > 1 {
        problems.push("cross-attention maps disagree on the token count".to_string());
    }
    if dump.cond.is_empty() {
        problems.push("no conditional-pass records found".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(dump)
}

/// Files produced by an offline segmentation.
#[derive(Debug, Clone)]
pub struct SegmentOutputs {
    pub masks: SegmentationMasks,
    pub files: Vec<PathBuf>,
}

/// Segment a dumped attention stack and write per-token PGM masks, the CSV
/// index map, and (when unconditional records are present) the foreground
/// mask.
pub fn segment_dump(
    dir: &Path,
    propagation_steps: usize,
    out_dir: &Path,
    force: bool,
) -> Result<SegmentOutputs> {
    let dump = load_attention_dump(dir)?;
    let masks = segment_records(&dump.cond, true, propagation_steps)?;
    std::fs::create_dir_all(out_dir)?;

    let mut files = Vec::new();
    for (i, mask) in masks.masks.iter().enumerate() {
        let path = out_dir.join(format!("mask_token{i}.pgm"));
        write_pgm_mask(&path, mask, masks.resolution, force)?;
        files.push(path);
    }
    let index_path = out_dir.join("index_map.csv");
    write_index_map_csv(&index_path, &masks, force)?;
    files.push(index_path);

    if !dump.uncond.is_empty() {
        let uncond_masks = segment_records(&dump.uncond, true, propagation_steps)?;
        let fg = foreground_mask(&uncond_masks, 0, BenchmarkMode::Foreground)?;
        let path = out_dir.join("mask_foreground.pgm");
        write_pgm_mask(&path, &fg, uncond_masks.resolution, force)?;
        files.push(path);
    }
    Ok(SegmentOutputs { masks, files })
}
