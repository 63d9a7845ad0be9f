//! Model building and the training loop.
//!
//! Training is fully seeded: weight init, data order and the optimizer are
//! all driven by ChaCha20 streams derived from the config seed, and every
//! pass runs single-threaded in f64, so repeated runs produce bit-identical
//! weight checksums.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, softmax, Layer, Model};
use crate::patch::Patch;
use crate::split::DatasetSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet50,
    Vgg16,
    Smallcnn,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Backbone> {
        match s.to_ascii_lowercase().as_str() {
            "resnet50" => Ok(Backbone::Resnet50),
            "vgg16" => Ok(Backbone::Vgg16),
            "smallcnn" => Ok(Backbone::Smallcnn),
            other => Err(Error::UnsupportedBackbone(other.to_string())),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backbone::Resnet50 => write!(f, "resnet50"),
            Backbone::Vgg16 => write!(f, "vgg16"),
            Backbone::Smallcnn => write!(f, "smallcnn"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    PretrainedImagenet,
    Random,
}

// The remaining architecture/optimisation choices are fixed; they are kept
// as single-variant enums so persisted configs state them explicitly.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Avg,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Softmax,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CategoricalCrossentropy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValidationAccuracy,
}

/// Which channels a model trains on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSelection {
    All,
    Channels(Vec<String>),
}

impl ChannelSelection {
    pub fn label(&self) -> String {
        match self {
            ChannelSelection::All => "ALL".to_string(),
            ChannelSelection::Channels(names) => names.join("+"),
        }
    }

    /// Concrete channel list given the available names.
    pub fn resolve(&self, available: &[String]) -> Vec<String> {
        match self {
            ChannelSelection::All => available.to_vec(),
            ChannelSelection::Channels(names) => names.clone(),
        }
    }
}

impl Serialize for ChannelSelection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ChannelSelection::All => serializer.serialize_str("ALL"),
            ChannelSelection::Channels(names) => names.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for ChannelSelection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(String),
            Many(Vec<String>),
        }
        Ok(match Raw::deserialize(deserializer)? {
            Raw::One(s) if s.eq_ignore_ascii_case("all") => ChannelSelection::All,
            Raw::One(s) => ChannelSelection::Channels(vec![s]),
            Raw::Many(v) if v.len() == 1 && v[0].eq_ignore_ascii_case("all") => {
                ChannelSelection::All
            }
            Raw::Many(v) => ChannelSelection::Channels(v),
        })
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
fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub init: InitScheme,
    /// Weights file for `init = pretrained_imagenet`.
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub output_activation: OutputActivation,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub early_stop_monitor: Monitor,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    pub channel_selection: ChannelSelection,
    /// Layers carry biases by default; bias-free mode keeps the network
    /// purely linear between nonlinearities (exact conservation checks).
    #[serde(default = "default_bias")]
    pub bias: bool,
}

impl TrainConfig {
    pub fn smallcnn(seed: u64, channel_selection: ChannelSelection) -> TrainConfig {
        TrainConfig {
            backbone: Backbone::Smallcnn,
            init: InitScheme::Random,
            pretrained_weights: None,
            pooling: Pooling::Avg,
            output_activation: OutputActivation::Softmax,
            optimizer: Optimizer::Adam,
            learning_rate: default_lr(),
            loss: Loss::CategoricalCrossentropy,
            early_stop_patience: default_patience(),
            early_stop_monitor: Monitor::ValidationAccuracy,
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            seed,
            channel_selection,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter("learning_rate must be > 0".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter("max_epochs must be >= 1".to_string()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidParameter("patience must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Post-softmax probabilities and the raw logits they came from.
#[derive(Debug, Clone)]
pub struct ClassScores {
    pub probabilities: Array1<f64>,
    pub logits: Array1<f64>,
}

impl ClassScores {
    pub fn predicted_class(&self) -> usize {
        self.probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("non-empty scores")
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// A trained model plus everything needed to reproduce and audit it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub split_fingerprint: String,
    pub history: Vec<EpochStats>,
    pub stopped_epoch: usize,
}

impl TrainedModel {
    pub fn weights_checksum(&self) -> String {
        self.model.checksum()
    }

    /// Persist as `model.mxm`, `config.toml`, `history.csv`, `fingerprint.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.mxm"))?;
        let config_text = toml::to_string_pretty(&self.config)
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("config.toml"), config_text)?;
        let mut writer = csv::Writer::from_path(dir.join("history.csv"))?;
        for row in &self.history {
            writer.serialize(row)?;
        }
        writer.flush()?;
        fs::write(dir.join("fingerprint.txt"), &self.split_fingerprint)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TrainedModel> {
        let model = Model::load(&dir.join("model.mxm"))?;
        let config: TrainConfig =
            toml::from_str(&fs::read_to_string(dir.join("config.toml"))?)
                .map_err(|e| Error::Config(e.to_string()))?;
        let mut history = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("history.csv"))?;
        for row in reader.deserialize() {
            history.push(row?);
        }
        let split_fingerprint = fs::read_to_string(dir.join("fingerprint.txt"))?
            .trim()
            .to_string();
        let stopped_epoch = history.len();
        Ok(TrainedModel { model, config, split_fingerprint, history, stopped_epoch })
    }
}

/// Build a model for the configured backbone.
///
/// Pretrained initialisation loads a 3-channel model file, adapts its first
/// convolution to `input_channels` (see [`nn::adapt_input_channels`]) and
/// keeps a freshly seeded head when the stored head does not match the
/// 2-way output.
pub fn build_model(config: &TrainConfig, input_channels: usize) -> Result<Model> {
    config.validate()?;
    if input_channels == 0 {
        return Err(Error::InvalidParameter("input_channels must be >= 1".to_string()));
    }
    let num_classes = 2;
    let fresh = match config.backbone {
        Backbone::Smallcnn => nn::small_cnn(input_channels, num_classes, config.bias, config.seed),
        Backbone::Vgg16 => nn::vgg16(input_channels, num_classes, config.seed),
        Backbone::Resnet50 => nn::resnet50(input_channels, num_classes, config.seed),
    };
    match config.init {
        InitScheme::Random => Ok(fresh),
        InitScheme::PretrainedImagenet => {
            let path = config
                .pretrained_weights
                .as_ref()
                .ok_or(Error::MissingPretrainedWeights)?;
            let mut pretrained = Model::load(path)?;
            let first_conv = pretrained
                .layers
                .iter_mut()
                .find_map(|l| match l {
                    Layer::Conv2d(c) => Some(c),
                    _ => None,
                })
                .ok_or_else(|| Error::Decode("pretrained model lacks a convolution".to_string()))?;
            if input_channels != first_conv.weight.dim().1 {
                first_conv.weight =
                    nn::adapt_input_channels(&first_conv.weight, input_channels)?;
            }
            pretrained.input_channels = input_channels;
            // replace an incompatible head with the seeded fresh one
            let head_ok = matches!(
                pretrained.layers.last(),
                Some(Layer::Dense(d)) if d.weight.dim().0 == num_classes
            );
            if !head_ok {
                if let (Some(slot), Some(Layer::Dense(fresh_head))) =
                    (pretrained.layers.last_mut(), fresh.layers.last())
                {
                    *slot = Layer::Dense(fresh_head.clone());
                }
            }
            pretrained.num_classes = num_classes;
            Ok(pretrained)
        }
    }
}

/// Reorder patch data (H, W, C) into model layout (C, H, W).
pub fn patch_to_input(patch: &Patch) -> Array3<f64> {
    patch
        .data
        .view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .to_owned()
}

/// Deterministic forward pass through a trained model.
pub fn predict(trained: &TrainedModel, patch: &Patch) -> Result<ClassScores> {
    predict_with(&trained.model, patch)
}

pub fn predict_with(model: &Model, patch: &Patch) -> Result<ClassScores> {
    if patch.num_channels() != model.input_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", model.input_channels),
            found: format!("{} channels", patch.num_channels()),
        });
    }
    let logits = model.forward(&patch_to_input(patch))?;
    Ok(ClassScores { probabilities: softmax(&logits), logits })
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(model: &Model, lr: f64) -> Adam {
        let mut m = Vec::new();
        for layer in &model.layers {
            layer.visit_params(&mut |slice| m.push(vec![0.0; slice.len()]));
        }
        let v = m.clone();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    fn step(&mut self, model: &mut Model, grads: &Model) {
        self.t += 1;
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(self.m.len());
        for layer in &grads.layers {
            layer.visit_params(&mut |slice| g.push(slice.to_vec()));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut k = 0usize;
        for layer in &mut model.layers {
            layer.visit_params_mut(&mut |slice| {
                let mk = &mut m[k];
                let vk = &mut v[k];
                let gk = &g[k];
                for i in 0..slice.len() {
                    mk[i] = beta1 * mk[i] + (1.0 - beta1) * gk[i];
                    vk[i] = beta2 * vk[i] + (1.0 - beta2) * gk[i] * gk[i];
                    let m_hat = mk[i] / bc1;
                    let v_hat = vk[i] / bc2;
                    slice[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                k += 1;
            });
        }
    }
}

fn zero_params(model: &mut Model) {
    for layer in &mut model.layers {
        layer.visit_params_mut(&mut |slice| slice.fill(0.0));
    }
}

/// Mean loss and accuracy over a set of patches.
pub fn evaluate(model: &Model, patches: &[Patch], indices: &[usize]) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for &i in indices {
        let patch = &patches[i];
        let scores = predict_with(model, patch)?;
        let target = patch.class_label.index();
        loss_sum += -(scores.probabilities[target].max(1e-300)).ln();
        if scores.predicted_class() == target {
            correct += 1;
        }
    }
    let n = indices.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Train with Adam and categorical cross-entropy, monitoring validation
/// accuracy. The best-validation weights are restored on return; training
/// stops when validation accuracy has not improved for
/// `early_stop_patience` epochs, or at `max_epochs`.
pub fn train(
    model: Model,
    patches: &[Patch],
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidParameter(
            "split must be nonempty in all partitions".to_string(),
        ));
    }
    if let Some(&first) = split.train.first() {
        if patches[first].num_channels() != model.input_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", model.input_channels),
                found: format!("{} channels", patches[first].num_channels()),
            });
        }
    }

    let mut model = model;
    let mut grads = model.zeros_like();
    let mut adam = Adam::new(&model, config.learning_rate);
    // data-order stream, separate from the init stream
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_weights = model.clone();
    let mut stopped_epoch = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut shuffle_rng);

        let mut train_loss_sum = 0.0;
        let mut train_correct = 0usize;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            zero_params(&mut grads);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let patch = &patches[i];
                let x = patch_to_input(patch);
                let (layer_inputs, logits) = model.forward_recorded(&x)?;
                let probs = softmax(&logits);
                let target = patch.class_label.index();
                let loss = -(probs[target].max(1e-300)).ln();
                if !loss.is_finite() || probs.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
                }
                train_loss_sum += loss;
                let predicted = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(k, _)| k)
                    .expect("non-empty");
                if predicted == target {
                    train_correct += 1;
                }
                // d(cross-entropy)/d(logits) = softmax - onehot
                let mut grad_logits = probs;
                grad_logits[target] -= 1.0;
                grad_logits *= scale;
                model.backward(&layer_inputs, &grad_logits, &mut grads)?;
            }
            adam.step(&mut model, &grads);
        }

        let n_train = order.len() as f64;
        let (val_loss, val_acc) = evaluate(&model, patches, &split.validation)?;
        history.push(EpochStats {
            epoch,
            train_loss: train_loss_sum / n_train,
            train_acc: train_correct as f64 / n_train,
            val_loss,
            val_acc,
        });

        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_weights = model.clone();
        }
        stopped_epoch = epoch;
        if epoch - best_epoch >= config.early_stop_patience {
            break;
        }
    }

    Ok(TrainedModel {
        model: best_weights,
        config: config.clone(),
        split_fingerprint: split.fingerprint(patches),
        history,
        stopped_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::ClassLabel;
    use ndarray::{array, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn toy_patch(label: ClassLabel, level: f64, seed: u64, size: usize) -> Patch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Patch {
            source_subject: format!("s{seed}"),
            class_label: label,
            origin: (0, 0),
            data: Array3::from_shape_fn((size, size, 1), |_| {
                (level + 0.05 * rng.random::<f64>()).clamp(0.0, 1.0)
            }),
            channel_names: vec!["NDUFB8".to_string()],
        }
    }

    /// 20 trivially separable patches: patients bright, controls dim.
    fn toy_dataset(size: usize) -> (Vec<Patch>, DatasetSplit) {
        let mut patches = Vec::new();
        for i in 0..10 {
            patches.push(toy_patch(ClassLabel::Control, 0.1, i, size));
            patches.push(toy_patch(ClassLabel::Patient, 0.8, 100 + i, size));
        }
        let split = DatasetSplit {
            train: (0..16).collect(),
            validation: vec![16, 17],
            test: vec![18, 19],
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
            grouped_by_subject: false,
        };
        (patches, split)
    }

    fn fast_config(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            max_epochs: 60,
            early_stop_patience: 60,
            batch_size: 8,
            ..TrainConfig::smallcnn(seed, ChannelSelection::Channels(vec!["NDUFB8".to_string()]))
        }
    }

    #[test]
    fn overfit_oracle_reaches_perfect_train_accuracy() {
        let (patches, split) = toy_dataset(16);
        let config = fast_config(5);
        let model = build_model(&config, 1).unwrap();
        let trained = train(model, &patches, &split, &config).unwrap();
        let last = trained.history.last().unwrap();
        assert_eq!(last.train_acc, 1.0, "history: {:?}", trained.history.last());
        // train loss should be settling: nonincreasing over the last 10
        // epochs within a small slack
        let tail: Vec<f64> = trained
            .history
            .iter()
            .rev()
            .take(10)
            .map(|e| e.train_loss)
            .collect();
        for pair in tail.windows(2) {
            // reversed order: pair[0] is later than pair[1]
            assert!(pair[0] <= pair[1] + 1e-3, "loss not settling: {tail:?}");
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (patches, split) = toy_dataset(12);
        let mut config = fast_config(9);
        config.max_epochs = 8;
        config.early_stop_patience = 8;
        let a = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap();
        let b = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        assert_eq!(a.history, b.history);
        assert_eq!(a.split_fingerprint, b.split_fingerprint);
    }

    #[test]
    fn constant_validation_accuracy_stops_at_best_plus_patience() {
        let (patches, split) = toy_dataset(8);
        let mut config = fast_config(2);
        // learning rate small enough that nothing changes -> constant val acc
        config.learning_rate = 1e-300;
        config.max_epochs = 50;
        config.early_stop_patience = 4;
        let trained = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap();
        assert_eq!(trained.stopped_epoch, 1 + 4);
        assert_eq!(trained.history.len(), trained.stopped_epoch);
    }

    #[test]
    fn restored_weights_come_from_the_best_validation_epoch() {
        let (patches, split) = toy_dataset(12);
        let mut config = fast_config(3);
        config.max_epochs = 12;
        config.early_stop_patience = 12;
        let trained = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap();
        let best = trained
            .history
            .iter()
            .map(|e| e.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let (_, restored_acc) = evaluate(&trained.model, &patches, &split.validation).unwrap();
        assert_eq!(restored_acc, best);
    }

    #[test]
    fn predict_probabilities_sum_to_one_and_zero_head_is_symmetric() {
        let config = fast_config(4);
        let mut model = build_model(&config, 1).unwrap();
        let patch = toy_patch(ClassLabel::Patient, 0.4, 0, 16);
        let scores = predict_with(&model, &patch).unwrap();
        assert!((scores.probabilities.sum() - 1.0).abs() < 1e-6);

        // zero the final dense layer: logits (0, 0) -> probabilities (1/2, 1/2)
        if let Some(Layer::Dense(d)) = model.layers.last_mut() {
            d.weight.fill(0.0);
            if let Some(b) = &mut d.bias {
                b.fill(0.0);
            }
        }
        let scores = predict_with(&model, &patch).unwrap();
        assert_eq!(scores.probabilities[0], 0.5);
        assert_eq!(scores.probabilities[1], 0.5);
    }

    #[test]
    fn single_linear_layer_logit_is_the_dot_product() {
        // w = [3, -2], x = [1, 1] -> logit 1 for the target unit
        let model = Model::new(
            vec![
                Layer::Flatten,
                Layer::Dense(crate::nn::Dense {
                    weight: array![[3.0, -2.0], [0.0, 0.0]],
                    bias: None,
                }),
            ],
            1,
            2,
        );
        let patch = Patch {
            source_subject: "s".to_string(),
            class_label: ClassLabel::Patient,
            origin: (0, 0),
            data: Array3::from_elem((1, 2, 1), 1.0),
            channel_names: vec!["a".to_string()],
        };
        let scores = predict_with(&model, &patch).unwrap();
        assert!((scores.logits[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_layer_response_is_linear_in_constant_offsets() {
        // bias-free single linear layer: f(x + c*1) - f(x) must not depend on x
        let model = Model::new(
            vec![
                Layer::Flatten,
                Layer::Dense(crate::nn::Dense {
                    weight: array![[0.5, -1.5, 2.0], [1.0, 0.25, -0.75]],
                    bias: None,
                }),
            ],
            1,
            2,
        );
        let c = 0.37;
        let xs = [array![0.0, 1.0, -2.0], array![5.0, -3.0, 0.5]];
        let mut shifts = Vec::new();
        for x in &xs {
            let input = Array3::from_shape_vec((1, 1, 3), x.to_vec()).unwrap();
            let shifted = input.mapv(|v| v + c);
            let delta = model.forward(&shifted).unwrap() - model.forward(&input).unwrap();
            shifts.push(delta);
        }
        for (a, b) in shifts[0].iter().zip(shifts[1].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let config = fast_config(6);
        let model = build_model(&config, 2).unwrap();
        let patch = toy_patch(ClassLabel::Control, 0.2, 0, 16);
        assert!(matches!(
            predict_with(&model, &patch),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pretrained_first_layer_loads_bit_exact_and_adapts() {
        // fabricate a small "pretrained" 3-channel model on disk
        let donor = nn::small_cnn(3, 2, true, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrained.mxm");
        donor.save(&path).unwrap();

        let mut config = fast_config(1);
        config.init = InitScheme::PretrainedImagenet;
        config.pretrained_weights = Some(path.clone());

        // 3 channels: identity load, bit exact
        let loaded = build_model(&config, 3).unwrap();
        let donor_first = match &donor.layers[0] {
            Layer::Conv2d(c) => &c.weight,
            _ => unreachable!(),
        };
        match &loaded.layers[0] {
            Layer::Conv2d(c) => assert_eq!(&c.weight, donor_first),
            _ => panic!("expected conv first"),
        }

        // 10 channels: every extra slice equals the mean of the first three
        let ten = build_model(&config, 10).unwrap();
        match &ten.layers[0] {
            Layer::Conv2d(c) => {
                assert_eq!(c.weight.dim().1, 10);
                let w = &c.weight;
                for o in 0..w.dim().0 {
                    for a in 0..3 {
                        for b in 0..3 {
                            let mean3: f64 = (0..3).map(|i| w[(o, i, a, b)]).sum::<f64>() / 3.0;
                            for extra in 3..10 {
                                assert!((w[(o, extra, a, b)] - mean3).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
            _ => panic!("expected conv first"),
        }

        // missing weights file parameter is an explicit error
        config.pretrained_weights = None;
        assert!(matches!(
            build_model(&config, 3),
            Err(Error::MissingPretrainedWeights)
        ));
    }

    #[test]
    fn exploding_training_aborts_with_a_diagnostic() {
        let (patches, split) = toy_dataset(8);
        let mut config = fast_config(7);
        // a pathological learning rate drives the weights to +-inf within
        // an epoch or two; training must abort, not emit NaN models
        config.learning_rate = 1e300;
        config.max_epochs = 5;
        config.early_stop_patience = 5;
        let err = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn resnet50_pretrained_first_layer_is_bit_exact() {
        // full identity-load path through the on-disk format
        let donor = nn::resnet50(3, 2, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resnet50.mxm");
        donor.save(&path).unwrap();

        let mut config = fast_config(1);
        config.backbone = Backbone::Resnet50;
        config.init = InitScheme::PretrainedImagenet;
        config.pretrained_weights = Some(path);
        let loaded = build_model(&config, 3).unwrap();
        let donor_first = match &donor.layers[0] {
            Layer::Conv2d(c) => &c.weight,
            _ => unreachable!(),
        };
        match &loaded.layers[0] {
            Layer::Conv2d(c) => {
                assert_eq!(c.weight.dim(), (64, 3, 7, 7));
                assert_eq!(&c.weight, donor_first, "bit-exact identity load");
            }
            other => panic!("expected conv first, got {}", other.kind()),
        }

        // 10-channel adaptation keeps the 7x7 geometry
        let ten = build_model(&config, 10).unwrap();
        match &ten.layers[0] {
            Layer::Conv2d(c) => assert_eq!(c.weight.dim(), (64, 10, 7, 7)),
            _ => panic!("expected conv first"),
        }
    }

    #[test]
    fn trained_model_round_trips_through_disk() {
        let (patches, split) = toy_dataset(8);
        let mut config = fast_config(8);
        config.max_epochs = 3;
        config.early_stop_patience = 3;
        let trained = train(build_model(&config, 1).unwrap(), &patches, &split, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trained.save(dir.path()).unwrap();
        let back = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(back.weights_checksum(), trained.weights_checksum());
        assert_eq!(back.history, trained.history);
        assert_eq!(back.config, trained.config);
    }
}
