//! Patch extraction, normalisation and on-disk patch sets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::checksum::sha256_file;
use crate::error::{Error, Result};
use crate::stack::{ChannelStack, ClassLabel};
use crate::tensorfile;

/// Maximum raw intensity of the 16-bit acquisition.
pub const INTENSITY_MAX: f64 = 65535.0;

/// A fixed-size window over selected channels of one stack.
///
/// `data` is laid out (rows, cols, channels); values are raw counts after
/// [`patchify`] and normalised intensities after [`normalize_patch`].
#[derive(Debug, Clone)]
pub struct Patch {
    pub source_subject: String,
    pub class_label: ClassLabel,
    /// (row, col) of the window's top-left corner in the source stack.
    pub origin: (usize, usize),
    pub data: Array3<f64>,
    pub channel_names: Vec<String>,
}

impl Patch {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A patch restricted to the named channels, in the order given.
    pub fn select_channels(&self, names: &[String]) -> Result<Patch> {
        if names.is_empty() {
            return Err(Error::EmptyChannelSelection);
        }
        let mut indices = Vec::with_capacity(names.len());
        for name in names {
            let index = self
                .channel_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnknownChannel(name.clone()))?;
            indices.push(index);
        }
        let (h, w, _) = self.data.dim();
        let mut data = Array3::<f64>::zeros((h, w, indices.len()));
        for (out_c, &in_c) in indices.iter().enumerate() {
            data.index_axis_mut(Axis(2), out_c)
                .assign(&self.data.index_axis(Axis(2), in_c));
        }
        Ok(Patch {
            source_subject: self.source_subject.clone(),
            class_label: self.class_label,
            origin: self.origin,
            data,
            channel_names: names.to_vec(),
        })
    }
}

/// What to do with windows that overhang the image boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Emit only fully interior windows.
    Drop,
    /// Emit boundary windows zero-padded to the patch size.
    PadZero,
}

/// Per-channel intensity normalisation policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum NormPolicy {
    /// Constant scale [0, 65535] -> [0, 1].
    UnitMax,
    /// Clip each channel to its [p_lo, p_hi] percentiles, then rescale to [0, 1].
    PercentileClip { p_lo: f64, p_hi: f64 },
    /// Standardise each channel; constant channels map to zeros.
    Zscore,
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormPolicy::UnitMax => write!(f, "unit_max"),
            NormPolicy::PercentileClip { p_lo, p_hi } => {
                write!(f, "percentile_clip({p_lo},{p_hi})")
            }
            NormPolicy::Zscore => write!(f, "zscore"),
        }
    }
}

/// Cut a stack into patches in row-major origin order.
pub fn patchify(
    stack: &ChannelStack,
    channel_selection: &[String],
    patch_size: usize,
    stride: usize,
    edge_policy: EdgePolicy,
) -> Result<Vec<Patch>> {
    if channel_selection.is_empty() {
        return Err(Error::EmptyChannelSelection);
    }
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "patch_size and stride must be >= 1".to_string(),
        ));
    }
    for name in channel_selection {
        if stack.channel(name).is_none() {
            return Err(Error::UnknownChannel(name.clone()));
        }
    }
    let (height, width) = stack.dims();
    let origins_along = |dim: usize| -> Vec<usize> {
        match edge_policy {
            EdgePolicy::Drop => {
                if dim < patch_size {
                    Vec::new()
                } else {
                    (0..=dim - patch_size).step_by(stride).collect()
                }
            }
            EdgePolicy::PadZero => (0..dim).step_by(stride).collect(),
        }
    };
    let rows = origins_along(height);
    let cols = origins_along(width);

    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let mut data = Array3::<f64>::zeros((patch_size, patch_size, channel_selection.len()));
            for (ci, name) in channel_selection.iter().enumerate() {
                let grid = stack.channel(name).expect("checked above");
                let r_end = (r0 + patch_size).min(height);
                let c_end = (c0 + patch_size).min(width);
                for r in r0..r_end {
                    for c in c0..c_end {
                        data[(r - r0, c - c0, ci)] = f64::from(grid[(r, c)]);
                    }
                }
            }
            patches.push(Patch {
                source_subject: stack.subject_id.clone(),
                class_label: stack.class_label,
                origin: (r0, c0),
                data,
                channel_names: channel_selection.to_vec(),
            });
        }
    }
    Ok(patches)
}

/// Normalise a patch per channel according to `policy`.
pub fn normalize_patch(patch: &Patch, policy: NormPolicy) -> Patch {
    let mut out = patch.clone();
    match policy {
        NormPolicy::UnitMax => {
            out.data.mapv_inplace(|v| v / INTENSITY_MAX);
        }
        NormPolicy::PercentileClip { p_lo, p_hi } => {
            for mut channel in out.data.axis_iter_mut(Axis(2)) {
                let values: Vec<f64> = channel.iter().copied().collect();
                let lo = percentile(&values, p_lo);
                let hi = percentile(&values, p_hi);
                if hi - lo <= f64::EPSILON {
                    channel.fill(0.0);
                } else {
                    channel.mapv_inplace(|v| (v.clamp(lo, hi) - lo) / (hi - lo));
                }
            }
        }
        NormPolicy::Zscore => {
            for mut channel in out.data.axis_iter_mut(Axis(2)) {
                let n = channel.len() as f64;
                let mean = channel.sum() / n;
                let var = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd <= f64::EPSILON {
                    channel.fill(0.0);
                } else {
                    channel.mapv_inplace(|v| (v - mean) / sd);
                }
            }
        }
    }
    out
}

/// Linear-interpolation percentile of `values`, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// One manifest record per persisted patch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchRecord {
    pub file: String,
    pub subject: String,
    pub label: ClassLabel,
    pub origin_row: usize,
    pub origin_col: usize,
    /// Channel names joined with ';'.
    pub channels: String,
    pub normalization: String,
    pub checksum: String,
}

/// Persist patches as per-patch tensor files plus a CSV manifest.
///
/// Returns the manifest path (`manifest.csv` inside `dir`).
pub fn write_patch_set(
    dir: &Path,
    patches: &[Patch],
    policy: NormPolicy,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    for (index, patch) in patches.iter().enumerate() {
        let file = format!("patch_{index:05}.mxt");
        let path = dir.join(&file);
        tensorfile::write_f64(&patch.data.clone().into_dyn(), &path)?;
        writer.serialize(PatchRecord {
            file,
            subject: patch.source_subject.clone(),
            label: patch.class_label,
            origin_row: patch.origin.0,
            origin_col: patch.origin.1,
            channels: patch.channel_names.join(";"),
            normalization: policy.to_string(),
            checksum: sha256_file(&path)?,
        })?;
    }
    writer.flush()?;
    Ok(manifest_path)
}

/// Parse a patch-set manifest. Does not touch the tensor files.
pub fn read_patch_manifest(manifest_path: &Path) -> Result<Vec<PatchRecord>> {
    let mut reader = csv::Reader::from_path(manifest_path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

/// Parse manifest records from raw CSV bytes (fuzzable entry point).
pub fn parse_patch_manifest(bytes: &[u8]) -> Result<Vec<PatchRecord>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut records = Vec::new();
    for row in reader.deserialize::<PatchRecord>() {
        records.push(row?);
    }
    Ok(records)
}

/// Load patches listed in a manifest, verifying checksums.
pub fn read_patch_set(manifest_path: &Path) -> Result<Vec<Patch>> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest has no parent directory".to_string()))?;
    let records = read_patch_manifest(manifest_path)?;
    let mut patches = Vec::with_capacity(records.len());
    for record in records {
        let path = dir.join(&record.file);
        let actual = sha256_file(&path)?;
        if actual != record.checksum {
            return Err(Error::Manifest(format!(
                "checksum mismatch for {}",
                record.file
            )));
        }
        let data = match tensorfile::read(&path)? {
            tensorfile::Tensor::F64(arr) => arr
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::Decode(e.to_string()))?,
            tensorfile::Tensor::F32(_) => {
                return Err(Error::Decode(format!("{} is not an f64 tensor", record.file)))
            }
        };
        patches.push(Patch {
            source_subject: record.subject,
            class_label: record.label,
            origin: (record.origin_row, record.origin_col),
            data,
            channel_names: record
                .channels
                .split(';')
                .map(|s| s.to_string())
                .collect(),
        });
    }
    Ok(patches)
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Error {
        Error::Manifest(e.to_string())
    }
}
