//! The binary tensor container used to exchange attention dumps and samples
//! with external pipelines.
//!
//! Layout, in file order:
//!
//! ```text
//! bytes 0..4   magic "TCNT"
//! bytes 4..8   u32 little-endian byte length of the text header
//! header       UTF-8 `key=value` lines terminated by '\n':
//!                version=<major>.<minor>   (required, first line)
//!                dtype=f32                 (required)
//!                shape=<d0,d1,...>         (required; may be empty for scalars)
//!                meta.<name>=<value>       (optional, sorted by name)
//! payload      little-endian f32 values, row-major, 4 * prod(shape) bytes
//! ```
//!
//! Readers reject unknown major versions and report payload length mismatches
//! with the byte offset where the payload starts.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"TCNT";
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

/// Named metadata stored in the container header. Keys are free-form; the
/// attention-dump convention uses `layer`, `resolution`, `pass`, and `step`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContainerMeta {
    entries: BTreeMap<String, String>,
}

impl ContainerMeta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn layer(&self) -> Option<usize> {
        self.get("layer").and_then(|v| v.parse().ok())
    }

    /// Resolution stored as `<h>x<w>`.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        let raw = self.get("resolution")?;
        let (h, w) = raw.split_once('x')?;
        Some((h.parse().ok()?, w.parse().ok()?))
    }

    pub fn pass(&self) -> Option<&str> {
        self.get("pass")
    }

    pub fn step(&self) -> Option<usize> {
        self.get("step").and_then(|v| v.parse().ok())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn validate(&self) -> Result<()> {
        for (k, v) in &self.entries {
            if k.is_empty() || k.contains('=') || k.contains('\n') {
                return Err(Error::parameter(format!("invalid metadata key {k:?}")));
            }
            if v.contains('\n') {
                return Err(Error::parameter(format!(
                    "metadata value for {k:?} must not contain newlines"
                )));
            }
        }
        Ok(())
    }
}

/// Encode a tensor and its metadata into container bytes.
pub fn encode_container(data: &ArrayD<f32>, meta: &ContainerMeta) -> Result<Vec<u8>> {
    meta.validate()?;
    if let Some(bad) = data.iter().find(|v| v.is_nan()) {
        let _ = bad;
        return Err(Error::parameter("refusing to write NaN payload"));
    }
    let shape: Vec<String> = data.shape().iter().map(|d| d.to_string()).collect();
    let mut header = String::new();
    header.push_str(&format!("version={FORMAT_MAJOR}.{FORMAT_MINOR}\n"));
    header.push_str("dtype=f32\n");
    header.push_str(&format!("shape={}\n", shape.join(",")));
    for (k, v) in meta.iter() {
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    let header_bytes = header.as_bytes();
    let mut out = Vec::with_capacity(8 + header_bytes.len() + 4 * data.len());
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(header_bytes);
    // Standard layout gives row-major order; fall back to an ordered iter
    // for views with exotic strides.
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::CorruptContainer {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Decode container bytes. `path` is used for error reporting only.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<(ArrayD<f32>, ContainerMeta)> {
    if bytes.len() < 8 {
        return Err(corrupt(path, 0, "file shorter than the fixed prologue"));
    }
    if bytes[0..4] != CONTAINER_MAGIC {
        return Err(corrupt(path, 0, "bad magic, expected \"TCNT\""));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(corrupt(
            path,
            8,
            format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        ));
    }
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| corrupt(path, 8, format!("header is not UTF-8: {e}")))?;

    let mut version: Option<(u32, u32)> = None;
    let mut dtype: Option<String> = None;
    let mut shape: Option<Vec<usize>> = None;
    let mut meta = ContainerMeta::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            corrupt(path, 8, format!("header line without '=': {line:?}"))
        })?;
        match key {
            "version" => {
                let (major, minor) = value.split_once('.').ok_or_else(|| {
                    corrupt(path, 8, format!("malformed version {value:?}"))
                })?;
                let major = major
                    .parse()
                    .map_err(|_| corrupt(path, 8, format!("malformed version {value:?}")))?;
                let minor = minor
                    .parse()
                    .map_err(|_| corrupt(path, 8, format!("malformed version {value:?}")))?;
                version = Some((major, minor));
            }
            "dtype" => dtype = Some(value.to_string()),
            "shape" => {
                let dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|d| {
                            d.parse::<usize>().map_err(|_| {
                                corrupt(path, 8, format!("malformed shape entry {d:?}"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?
                };
                shape = Some(dims);
            }
            _ => {
                if let Some(name) = key.strip_prefix("meta.") {
                    meta = meta.set(name, value);
                }
                // Unknown non-meta keys are ignored for minor-version growth.
            }
        }
    }

    let (major, _minor) = version.ok_or_else(|| corrupt(path, 8, "missing version field"))?;
    if major != FORMAT_MAJOR {
        return Err(corrupt(
            path,
            8,
            format!("unknown major version {major}, reader supports {FORMAT_MAJOR}"),
        ));
    }
    let dtype = dtype.ok_or_else(|| corrupt(path, 8, "missing dtype field"))?;
    if dtype != "f32" {
        return Err(corrupt(path, 8, format!("unsupported dtype {dtype:?}")));
    }
    let shape = shape.ok_or_else(|| corrupt(path, 8, "missing shape field"))?;

    let count: usize = shape.iter().product();
    let expected = count.checked_mul(4).ok_or_else(|| {
        corrupt(path, header_end as u64, "shape product overflows the payload size")
    })?;
    let actual = bytes.len() - header_end;
    if actual != expected {
        return Err(corrupt(
            path,
            header_end as u64,
            format!("payload holds {actual} bytes, shape {shape:?} requires {expected}"),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in bytes[header_end..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let array = ArrayD::from_shape_vec(IxDyn(&shape), values)
        .map_err(|e| corrupt(path, header_end as u64, format!("shape error: {e}")))?;
    Ok((array, meta))
}

/// Write a container file. Fails if the target exists unless `force` is set.
pub fn write_container(
    path: &Path,
    data: &ArrayD<f32>,
    meta: &ContainerMeta,
    force: bool,
) -> Result<()> {
    let bytes = encode_container(data, meta)?;
    let mut file = if force {
        std::fs::File::create(path)?
    } else {
        std::fs::File::create_new(path)?
    };
    file.write_all(&bytes)?;
    Ok(())
}

/// Read a container file.
pub fn read_container(path: &Path) -> Result<(ArrayD<f32>, ContainerMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_container(&bytes, path)
}

/// Which attention map a dump file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttn,
    Cross,
}

/// Which model pass a dump file came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PassKind {
    Cond,
    Uncond,
}

impl PassKind {
    pub fn label(self) -> &'static str {
        match self {
            PassKind::Cond => "cond",
            PassKind::Uncond => "uncond",
        }
    }
}

/// The on-disk naming convention for one step's attention stack:
/// `layer<k>_<self|cross>_<cond|uncond>.bin`.
pub fn attention_dump_filename(layer: usize, kind: AttentionKind, pass: PassKind) -> String {
    let kind = match kind {
        AttentionKind::SelfAttn => "self",
        AttentionKind::Cross => "cross",
    };
    format!("layer{layer}_{kind}_{}.bin", pass.label())
}

/// Parse a dump filename back into its coordinates; `None` when the name is
/// not part of the convention.
pub fn parse_dump_filename(name: &str) -> Option<(usize, AttentionKind, PassKind)> {
    let stem = name.strip_suffix(".bin")?;
    let rest = stem.strip_prefix("layer")?;
    let mut parts = rest.splitn(3, '_');
    let layer: usize = parts.next()?.parse().ok()?;
    let kind = match parts.next()? {
        "self" => AttentionKind::SelfAttn,
        "cross" => AttentionKind::Cross,
        _ => return None,
    };
    let pass = match parts.next()? {
        "cond" => PassKind::Cond,
        "uncond" => PassKind::Uncond,
        _ => return None,
    };
    Some((layer, kind, pass))
}

/// Convenience: lossy f64 -> f32 view of an owned tensor for export.
pub fn to_f32(data: &ndarray::Array3<f64>) -> ArrayD<f32> {
    data.mapv(|v| v as f32).into_dyn()
}

pub fn matrix_to_f32(data: &ndarray::Array2<f64>) -> ArrayD<f32> {
    data.mapv(|v| v as f32).into_dyn()
}

pub fn path_of(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
