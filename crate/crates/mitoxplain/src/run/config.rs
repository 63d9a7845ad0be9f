//! Run configuration: one TOML file describing the full experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::MethodName;
use crate::patch::{EdgePolicy, NormPolicy};
use crate::stack::LoadMode;
use crate::synth::TissueParams;
use crate::trainer::{Backbone, ChannelSelection, InitScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Ingest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_control: usize,
    pub n_patient: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub params: TissueParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    /// TIFF stacks to ingest.
    pub stacks: Vec<PathBuf>,
    /// Channel-map TOML per stack (one shared map is repeated).
    pub channel_maps: Vec<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: LoadMode,
}

fn default_mode() -> LoadMode {
    LoadMode::Strict
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub ingest: Option<IngestConfig>,
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_edge_policy() -> EdgePolicy {
    EdgePolicy::Drop
}

fn default_normalization() -> NormPolicy {
    NormPolicy::UnitMax
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub patch_size: usize,
    /// Defaults to `patch_size` (non-overlapping tiling).
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "default_edge_policy")]
    pub edge_policy: EdgePolicy,
    #[serde(default = "default_normalization")]
    pub normalization: NormPolicy,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    pub split_seed: u64,
    #[serde(default)]
    pub group_by_subject: bool,
}

impl PreprocessConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size)
    }
}

fn default_lr() -> f64 {
    0.001
}
fn default_patience() -> usize {
    200
}
fn default_max_epochs() -> usize {
    1000
}
fn default_batch_size() -> usize {
    16
}
fn default_init() -> InitScheme {
    InitScheme::Random
}
fn default_bias() -> bool {
    true
}

/// The training matrix: every backbone x channel selection x seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMatrixConfig {
    pub backbones: Vec<Backbone>,
    pub channel_selections: Vec<ChannelSelection>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_methods() -> Vec<MethodName> {
    MethodName::ALL.to_vec()
}

fn default_top_k() -> usize {
    5
}

fn default_patches_per_class() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodName>,
    /// Top-k single-channel models (all-channel models excluded).
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Test patches sampled per class per model (lowest patch index first).
    #[serde(default = "default_patches_per_class")]
    pub patches_per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainMatrixConfig,
    pub explain: ExplainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.source {
            DataSource::Synthetic => {
                let synth = self
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [data.synthetic]".to_string()))?;
                synth.params.validate().map_err(|e| Error::Config(e.to_string()))?;
                if synth.n_control + synth.n_patient == 0 {
                    return Err(Error::Config("empty cohort".to_string()));
                }
            }
            DataSource::Ingest => {
                let ingest = self
                    .data
                    .ingest
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [data.ingest]".to_string()))?;
                if ingest.stacks.is_empty() {
                    return Err(Error::Config("no stacks to ingest".to_string()));
                }
                if ingest.channel_maps.len() != 1
                    && ingest.channel_maps.len() != ingest.stacks.len()
                {
                    return Err(Error::Config(
                        "channel_maps must list one shared map or one per stack".to_string(),
                    ));
                }
            }
        }
        if self.preprocess.patch_size == 0 || self.preprocess.stride() == 0 {
            return Err(Error::Config("patch_size and stride must be >= 1".to_string()));
        }
        if (self.preprocess.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ratios {:?} do not sum to 1",
                self.preprocess.ratios
            )));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".to_string()));
        }
        if self.train.backbones.is_empty() || self.train.channel_selections.is_empty() {
            return Err(Error::Config("empty training matrix".to_string()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".to_string()));
        }
        if self.train.max_epochs == 0 || self.train.early_stop_patience == 0 {
            return Err(Error::Config("max_epochs and patience must be >= 1".to_string()));
        }
        if self.explain.methods.is_empty() {
            return Err(Error::Config("explain.methods is empty".to_string()));
        }
        let single_channel_models = self.train.backbones.len()
            * self
                .train
                .channel_selections
                .iter()
                .filter(|s| matches!(s, ChannelSelection::Channels(names) if names.len() == 1))
                .count();
        if self.explain.top_k > single_channel_models {
            return Err(Error::Config(format!(
                "top_k = {} exceeds the {} single-channel models in the matrix",
                self.explain.top_k, single_channel_models
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DESK_CONFIG: &str = r#"
[data]
source = "synthetic"

[data.synthetic]
n_control = 2
n_patient = 3
seed = 7
image_size = 128
fiber_count = 10
mean_fiber_diameter = 20.0
membrane_thickness = 2
noise_sd = 200.0
hole_fraction = 0.05
deficient_fiber_fraction = 0.5
deficiency_factor = 0.3
rrf_fraction = 0.1
rrf_gain = 2.5
deficient_channels = ["NDUFB8"]
subsarcolemmal_band = 3
subsarcolemmal_gain = 1.2

[data.synthetic.baseline_intensity]
COX4 = 10000.0
Dystrophin = 20000.0
GRIM19 = 10000.0
MTCO1 = 10000.0
NDUFB8 = 10000.0
OSCP = 10000.0
SDHA = 10000.0
TOM22 = 10000.0
UqCRC2 = 10000.0
VDAC1 = 10000.0

[preprocess]
patch_size = 64
split_seed = 3
group_by_subject = true

[train]
backbones = ["smallcnn"]
channel_selections = ["NDUFB8", "ALL"]
seeds = [1, 2]
max_epochs = 2
batch_size = 4
early_stop_patience = 2

[explain]
top_k = 1
methods = ["gradients", "lrp_z"]

[output]
dir = "run-out"
"#;

    #[test]
    fn desk_config_parses_and_validates() {
        let config = RunConfig::from_toml_str(DESK_CONFIG).unwrap();
        assert_eq!(config.train.seeds, vec![1, 2]);
        assert_eq!(config.preprocess.stride(), 64);
        assert!(matches!(config.data.source, DataSource::Synthetic));
        let synth = config.data.synthetic.as_ref().unwrap();
        assert_eq!(synth.params.image_size, 128);
        assert_eq!(synth.params.baseline_intensity["Dystrophin"], 20000.0);
    }

    #[test]
    fn top_k_larger_than_single_channel_models_is_invalid() {
        let text = DESK_CONFIG.replace("top_k = 1", "top_k = 3");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn bad_ratios_are_invalid() {
        let text = DESK_CONFIG.replace(
            "split_seed = 3",
            "split_seed = 3\nratios = [0.5, 0.1, 0.1]",
        );
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let config = RunConfig::from_toml_str(DESK_CONFIG).unwrap();
        let text = config.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.train.seeds, config.train.seeds);
        assert_eq!(back.preprocess.patch_size, config.preprocess.patch_size);
    }
}
