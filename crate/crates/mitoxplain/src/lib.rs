//! Classification of multichannel protein-expression pseudo-images and
//! post-hoc explanation of the trained classifiers.
//!
//! The crate covers the full experiment loop:
//!
//! * [`stack`] / [`tiffio`]: 16-bit multichannel stacks on disk (OME-TIFF).
//! * [`synth`]: synthetic tissue cohorts with planted phenotypes and
//!   ground-truth masks, for desk-scale experiments.
//! * [`patch`] / [`split`]: patch extraction, normalisation and
//!   deterministic dataset splits.
//! * [`nn`] / [`trainer`]: CNN backbones and a seeded training loop with
//!   early stopping.
//! * [`explain`]: nine gradient/signal/attribution methods implemented as
//!   explicit traversals over a recorded forward pass.
//! * [`metrics`]: per-run classification metrics and multi-seed rankings.
//! * [`viz`]: RGB overlays, diverging map renderings and triptych figures.
//! * [`run`]: experiment orchestration with a checksummed manifest.

pub mod checksum;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod run;
pub mod split;
pub mod stack;
pub mod synth;
pub mod tensorfile;
pub mod tiffio;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use patch::{normalize_patch, patchify, EdgePolicy, NormPolicy, Patch};
pub use split::{split_dataset, DatasetSplit};
pub use stack::{ChannelMap, ChannelStack, ClassLabel, LoadMode, CANONICAL_CHANNELS};
pub use tiffio::{load_stack, write_stack};
