//! Minimal CNN stack: layers, models, backbones and convolution kernels.
//!
//! Everything runs in f64 on the CPU, single-threaded and fully
//! deterministic, so trained weights and explanation maps are reproducible
//! bit for bit under a fixed seed.

pub mod backbones;
pub mod conv;
pub mod layer;
pub mod model;

pub use backbones::{adapt_input_channels, resnet50, small_cnn, vgg16};
pub use layer::{BatchNorm, Conv2d, Dense, Feature, Layer, MaxPool, Residual};
pub use model::{decode_model_bytes, softmax, Model};
