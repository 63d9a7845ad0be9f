//! Multichannel pseudo-image stacks.
//!
//! A [`ChannelStack`] holds one subject's co-registered set of named 16-bit
//! intensity images (one grid per protein marker). All grids share the same
//! dimensions and intensities are raw ion counts, never rescaled on load.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten marker names of the standard acquisition panel, sorted.
pub const CANONICAL_CHANNELS: [&str; 10] = [
    "COX4",
    "Dystrophin",
    "GRIM19",
    "MTCO1",
    "NDUFB8",
    "OSCP",
    "SDHA",
    "TOM22",
    "UqCRC2",
    "VDAC1",
];

/// The membrane marker used as the cell outline.
pub const MEMBRANE_CHANNEL: &str = "Dystrophin";

/// Outer-membrane markers treated as mitochondrial-mass channels.
pub const MITO_MASS_CHANNELS: [&str; 2] = ["VDAC1", "TOM22"];

/// Binary diagnosis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Control,
    Patient,
}

impl ClassLabel {
    /// Class index used by models: control = 0, patient = 1.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Control => 0,
            ClassLabel::Patient => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        match index {
            0 => Some(ClassLabel::Control),
            1 => Some(ClassLabel::Patient),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Control => write!(f, "control"),
            ClassLabel::Patient => write!(f, "patient"),
        }
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "control" => Ok(ClassLabel::Control),
            "patient" => Ok(ClassLabel::Patient),
            other => Err(Error::InvalidParameter(format!(
                "unknown class label '{other}'"
            ))),
        }
    }
}

/// Validation mode for channel naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// Require the full canonical channel set.
    Strict,
    /// Accept any channel names (non-canonical marker panels).
    Permissive,
}

/// Maps TIFF page index to a channel name, plus optional subject metadata.
///
/// Persisted as TOML next to ingested stacks, e.g.
///
/// ```toml
/// subject_id = "P01"
/// class_label = "patient"
///
/// [channels]
/// 0 = "COX4"
/// 1 = "Dystrophin"
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChannelMap {
    pub subject_id: Option<String>,
    pub class_label: Option<ClassLabel>,
    pub subtype: Option<String>,
    /// page index (as decimal string key in TOML) -> channel name
    #[serde(default)]
    pub channels: BTreeMap<u32, String>,
}

impl ChannelMap {
    /// Identity map over the canonical panel in canonical order.
    pub fn canonical() -> ChannelMap {
        ChannelMap {
            subject_id: None,
            class_label: None,
            subtype: None,
            channels: CANONICAL_CHANNELS
                .iter()
                .enumerate()
                .map(|(i, name)| (i as u32, name.to_string()))
                .collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ChannelMap> {
        toml::from_str(text).map_err(|e| Error::Config(format!("channel map: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("channel map: {e}")))
    }

    /// Name for a page, or an error in strict mode / a synthesised name otherwise.
    pub fn name_for_page(&self, page: usize, mode: LoadMode) -> Result<String> {
        match self.channels.get(&(page as u32)) {
            Some(name) => Ok(name.clone()),
            None => match mode {
                LoadMode::Strict => Err(Error::UnmappedPage(page)),
                LoadMode::Permissive => Ok(format!("page{page:02}")),
            },
        }
    }
}

/// One subject's co-registered intensity images, keyed by channel name.
#[derive(Debug, Clone)]
pub struct ChannelStack {
    pub subject_id: String,
    pub class_label: ClassLabel,
    /// Genetic diagnosis, when known.
    pub subtype: Option<String>,
    /// Micrometers per pixel.
    pub pixel_size: f64,
    channels: IndexMap<String, Array2<u16>>,
}

impl ChannelStack {
    /// Build a stack, enforcing equal grid dimensions and unique names.
    pub fn new(
        subject_id: impl Into<String>,
        class_label: ClassLabel,
        channels: Vec<(String, Array2<u16>)>,
    ) -> Result<ChannelStack> {
        let mut map = IndexMap::with_capacity(channels.len());
        let mut dims: Option<(usize, usize)> = None;
        for (name, grid) in channels {
            let (h, w) = grid.dim();
            match dims {
                None => dims = Some((h, w)),
                Some((eh, ew)) => {
                    if (h, w) != (eh, ew) {
                        return Err(Error::ChannelShapeMismatch {
                            channel: name,
                            expected_h: eh,
                            expected_w: ew,
                            found_h: h,
                            found_w: w,
                        });
                    }
                }
            }
            if map.insert(name.clone(), grid).is_some() {
                return Err(Error::DuplicateChannel(name));
            }
        }
        Ok(ChannelStack {
            subject_id: subject_id.into(),
            class_label,
            subtype: None,
            pixel_size: 1.0,
            channels: map,
        })
    }

    pub fn with_subtype(mut self, subtype: impl Into<String>) -> ChannelStack {
        self.subtype = Some(subtype.into());
        self
    }

    /// (height, width) shared by every channel; (0, 0) for an empty stack.
    pub fn dims(&self) -> (usize, usize) {
        self.channels
            .first()
            .map(|(_, g)| g.dim())
            .unwrap_or((0, 0))
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.keys().cloned().collect()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, name: &str) -> Option<&Array2<u16>> {
        self.channels.get(name)
    }

    pub fn channels(&self) -> impl Iterator<Item = (&String, &Array2<u16>)> {
        self.channels.iter()
    }

    /// Check the canonical-name invariant; always satisfied in permissive mode.
    pub fn validate_names(&self, mode: LoadMode) -> Result<()> {
        if mode == LoadMode::Permissive {
            return Ok(());
        }
        let missing: Vec<String> = CANONICAL_CHANNELS
            .iter()
            .filter(|name| !self.channels.contains_key(**name))
            .map(|s| s.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingCanonicalChannels(missing))
        }
    }
}
