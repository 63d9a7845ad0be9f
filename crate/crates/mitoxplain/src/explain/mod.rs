//! The nine explanation methods, dispatched over recorded forward passes.
//!
//! Three families:
//!
//! * function (`gradients`): exact partial derivatives of the target logit;
//! * signal (`deconvnet`, `guided_backprop`): modified ReLU backward rules;
//! * attribution (`input_times_gradient`, `deep_taylor`, `lrp_epsilon`,
//!   `lrp_z`, `lrp_preset_a_flat`, `lrp_preset_b_flat`): per-pixel relevance
//!   for the target logit.
//!
//! Every method explains the pre-softmax logit of the target class and is a
//! pure function of (model, patch, target): identical inputs give identical
//! maps.

pub mod deep_taylor;
pub mod lrp;
pub mod saliency;
pub mod trace;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::patch::Patch;
use crate::tensorfile;

pub use lrp::{preset_rules, LrpRuleConfig, PresetKind, Rule};
pub use saliency::ReluRule;
pub use trace::{fold_batchnorm, record_forward, ActivationTrace};

/// The available explanation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Gradients,
    Deconvnet,
    GuidedBackprop,
    InputTimesGradient,
    DeepTaylor,
    LrpEpsilon,
    LrpZ,
    LrpPresetAFlat,
    LrpPresetBFlat,
}

impl MethodName {
    pub const ALL: [MethodName; 9] = [
        MethodName::Gradients,
        MethodName::Deconvnet,
        MethodName::GuidedBackprop,
        MethodName::InputTimesGradient,
        MethodName::DeepTaylor,
        MethodName::LrpEpsilon,
        MethodName::LrpZ,
        MethodName::LrpPresetAFlat,
        MethodName::LrpPresetBFlat,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Gradients => "gradients",
            MethodName::Deconvnet => "deconvnet",
            MethodName::GuidedBackprop => "guided_backprop",
            MethodName::InputTimesGradient => "input_times_gradient",
            MethodName::DeepTaylor => "deep_taylor",
            MethodName::LrpEpsilon => "lrp_epsilon",
            MethodName::LrpZ => "lrp_z",
            MethodName::LrpPresetAFlat => "lrp_preset_a_flat",
            MethodName::LrpPresetBFlat => "lrp_preset_b_flat",
        }
    }

    /// Attribution methods conserve (or nearly conserve) the target logit.
    pub fn is_attribution(&self) -> bool {
        matches!(
            self,
            MethodName::InputTimesGradient
                | MethodName::DeepTaylor
                | MethodName::LrpEpsilon
                | MethodName::LrpZ
                | MethodName::LrpPresetAFlat
                | MethodName::LrpPresetBFlat
        )
    }
}

impl std::fmt::Display for MethodName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl std::str::FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<MethodName> {
        MethodName::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// Where a map came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub subject: String,
    pub origin_row: usize,
    pub origin_col: usize,
    pub channels: Vec<String>,
}

impl PatchRef {
    pub fn of(patch: &Patch) -> PatchRef {
        PatchRef {
            subject: patch.source_subject.clone(),
            origin_row: patch.origin.0,
            origin_col: patch.origin.1,
            channels: patch.channel_names.clone(),
        }
    }
}

/// Per-pixel signed explanation values for one (patch, method, class).
///
/// `values` is laid out like the patch data, (rows, cols, channels).
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    pub method: MethodName,
    pub values: Array3<f64>,
    pub target_class: usize,
    /// The explained pre-softmax logit.
    pub target_score: f64,
    pub patch_ref: PatchRef,
}

impl RelevanceMap {
    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// (C, H, W) engine output -> (H, W, C) patch layout.
fn to_patch_layout(map: Array3<f64>) -> Array3<f64> {
    map.permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

fn build_map(
    method: MethodName,
    values_chw: Array3<f64>,
    trace: &ActivationTrace,
    patch: &Patch,
    target_class: usize,
) -> RelevanceMap {
    RelevanceMap {
        method,
        values: to_patch_layout(values_chw),
        target_class,
        target_score: trace.logits[target_class],
        patch_ref: PatchRef::of(patch),
    }
}

/// Exact partial derivatives of the target logit with respect to the input.
pub fn gradient_map(model: &Model, patch: &Patch, target_class: usize) -> Result<RelevanceMap> {
    let (_, trace) = record_forward(model, patch)?;
    let g = saliency::saliency_backward(&trace, target_class, ReluRule::Gradient)?;
    Ok(build_map(MethodName::Gradients, g, &trace, patch, target_class))
}

/// Backward pass with rectified backward signals at each ReLU.
pub fn deconvnet_map(model: &Model, patch: &Patch, target_class: usize) -> Result<RelevanceMap> {
    let (_, trace) = record_forward(model, patch)?;
    let g = saliency::saliency_backward(&trace, target_class, ReluRule::Deconvnet)?;
    Ok(build_map(MethodName::Deconvnet, g, &trace, patch, target_class))
}

/// Intersection of the gradient and deconvnet ReLU masks.
pub fn guided_backprop_map(
    model: &Model,
    patch: &Patch,
    target_class: usize,
) -> Result<RelevanceMap> {
    let (_, trace) = record_forward(model, patch)?;
    let g = saliency::saliency_backward(&trace, target_class, ReluRule::Guided)?;
    Ok(build_map(MethodName::GuidedBackprop, g, &trace, patch, target_class))
}

/// Element-wise product of the input and the gradient map.
pub fn input_times_gradient_map(
    model: &Model,
    patch: &Patch,
    target_class: usize,
) -> Result<RelevanceMap> {
    let mut map = gradient_map(model, patch, target_class)?;
    map.method = MethodName::InputTimesGradient;
    map.values = &map.values * &patch.data;
    Ok(map)
}

/// Layer-wise relevance propagation under the given rule configuration.
pub fn lrp_map(
    model: &Model,
    patch: &Patch,
    target_class: usize,
    rules: &LrpRuleConfig,
) -> Result<RelevanceMap> {
    let (_, trace) = record_forward(model, patch)?;
    let r = lrp::lrp_backward(&trace, target_class, rules)?;
    Ok(build_map(MethodName::LrpZ, r, &trace, patch, target_class))
}

/// Deep Taylor decomposition (z+ on hidden layers, box rule on the input).
pub fn deep_taylor_map(model: &Model, patch: &Patch, target_class: usize) -> Result<RelevanceMap> {
    let (_, trace) = record_forward(model, patch)?;
    let r = deep_taylor::deep_taylor_backward(&trace, target_class)?;
    Ok(build_map(MethodName::DeepTaylor, r, &trace, patch, target_class))
}

/// `|sum(values) - target_score| / max(|target_score|, 1e-12)`.
pub fn conservation_residual(map: &RelevanceMap) -> f64 {
    (map.sum() - map.target_score).abs() / map.target_score.abs().max(1e-12)
}

/// Dispatch a method by name with its preset configuration.
pub fn explain(
    model: &Model,
    patch: &Patch,
    method: MethodName,
    target_class: usize,
) -> Result<RelevanceMap> {
    let mut map = match method {
        MethodName::Gradients => gradient_map(model, patch, target_class)?,
        MethodName::Deconvnet => deconvnet_map(model, patch, target_class)?,
        MethodName::GuidedBackprop => guided_backprop_map(model, patch, target_class)?,
        MethodName::InputTimesGradient => input_times_gradient_map(model, patch, target_class)?,
        MethodName::DeepTaylor => deep_taylor_map(model, patch, target_class)?,
        MethodName::LrpEpsilon => lrp_map(
            model,
            patch,
            target_class,
            &LrpRuleConfig::uniform(Rule::Epsilon(1e-7)),
        )?,
        MethodName::LrpZ => lrp_map(model, patch, target_class, &LrpRuleConfig::uniform(Rule::Z))?,
        MethodName::LrpPresetAFlat => {
            lrp_map(model, patch, target_class, &preset_rules(PresetKind::AFlat))?
        }
        MethodName::LrpPresetBFlat => {
            lrp_map(model, patch, target_class, &preset_rules(PresetKind::BFlat))?
        }
    };
    map.method = method;
    Ok(map)
}

/// Sidecar metadata stored with each persisted map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceMapMeta {
    pub method: MethodName,
    pub target_class: usize,
    pub target_score: f64,
    pub model_checksum: String,
    pub patch: PatchRef,
}

/// Persist a map as a 32-bit float tensor plus a TOML metadata sidecar.
///
/// Returns (tensor path, metadata path).
pub fn write_relevance_map(
    map: &RelevanceMap,
    model_checksum: &str,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let tensor_path = dir.join(format!("{stem}.mxt"));
    let meta_path = dir.join(format!("{stem}.toml"));
    let f32_values = map.values.mapv(|v| v as f32).into_dyn();
    tensorfile::write_f32(&f32_values, &tensor_path)?;
    let meta = RelevanceMapMeta {
        method: map.method,
        target_class: map.target_class,
        target_score: map.target_score,
        model_checksum: model_checksum.to_string(),
        patch: map.patch_ref.clone(),
    };
    let text = toml::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&meta_path, text)?;
    Ok((tensor_path, meta_path))
}

/// Parse relevance-map metadata (fuzzable entry point).
pub fn parse_relevance_meta(text: &str) -> Result<RelevanceMapMeta> {
    toml::from_str(text).map_err(|e| Error::Config(format!("relevance meta: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{small_cnn, Dense, Layer};
    use crate::stack::ClassLabel;
    use ndarray::{array, Array3};

    fn linear_patch(x: &[f64]) -> Patch {
        Patch {
            source_subject: "s".to_string(),
            class_label: ClassLabel::Patient,
            origin: (0, 0),
            data: Array3::from_shape_vec((1, x.len(), 1), x.to_vec()).unwrap(),
            channel_names: vec!["ch".to_string()],
        }
    }

    /// y = w . x as a 2-class model (second logit zero).
    fn linear_model(w: &[f64]) -> Model {
        let mut weight = ndarray::Array2::zeros((2, w.len()));
        for (j, &v) in w.iter().enumerate() {
            weight[(0, j)] = v;
        }
        Model::new(
            vec![Layer::Flatten, Layer::Dense(Dense { weight, bias: None })],
            1,
            2,
        )
    }

    #[test]
    fn gradient_of_a_linear_model_is_w() {
        let model = linear_model(&[3.0, -2.0]);
        let map = gradient_map(&model, &linear_patch(&[1.5, 0.5]), 0).unwrap();
        assert!((map.values[(0, 0, 0)] - 3.0).abs() < 1e-12);
        assert!((map.values[(0, 1, 0)] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_output_unit_gives_a_zero_map() {
        let model = linear_model(&[3.0, -2.0]);
        // class 1 has all-zero weights
        let map = gradient_map(&model, &linear_patch(&[1.0, 1.0]), 1).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_times_gradient_on_the_linear_model() {
        // w = [3, -2], x = [2, 1] -> [6, -2], sum 4 = y
        let model = linear_model(&[3.0, -2.0]);
        let map = input_times_gradient_map(&model, &linear_patch(&[2.0, 1.0]), 0).unwrap();
        assert!((map.values[(0, 0, 0)] - 6.0).abs() < 1e-12);
        assert!((map.values[(0, 1, 0)] + 2.0).abs() < 1e-12);
        assert!((map.sum() - 4.0).abs() < 1e-12);
        assert!((map.target_score - 4.0).abs() < 1e-12);

        // zero input -> zero map
        let zero = input_times_gradient_map(&model, &linear_patch(&[0.0, 0.0]), 0).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        // x of ones -> the weights themselves
        let ones = input_times_gradient_map(&model, &linear_patch(&[1.0, 1.0]), 0).unwrap();
        assert!((ones.values[(0, 0, 0)] - 3.0).abs() < 1e-12);
        assert!((ones.values[(0, 1, 0)] + 2.0).abs() < 1e-12);
    }

    /// y = relu(x * w1) * w2 on a single scalar input.
    fn relu_chain(w1: f64, w2: f64) -> Model {
        Model::new(
            vec![
                Layer::Flatten,
                Layer::Dense(Dense { weight: array![[w1]], bias: None }),
                Layer::ReLU,
                Layer::Dense(Dense { weight: array![[w2], [0.0]], bias: None }),
            ],
            1,
            2,
        )
    }

    #[test]
    fn relu_discriminators_negative_path() {
        // y = relu(1*x) * (-1), x = 2: gradient -1, deconvnet 0, guided 0
        let model = relu_chain(1.0, -1.0);
        let patch = linear_patch(&[2.0]);
        let g = gradient_map(&model, &patch, 0).unwrap();
        let d = deconvnet_map(&model, &patch, 0).unwrap();
        let u = guided_backprop_map(&model, &patch, 0).unwrap();
        assert!((g.values[(0, 0, 0)] + 1.0).abs() < 1e-12);
        assert_eq!(d.values[(0, 0, 0)], 0.0);
        assert_eq!(u.values[(0, 0, 0)], 0.0);
    }

    #[test]
    fn relu_discriminators_positive_path() {
        // y = relu(1*x) * (+1), x = 2: all three agree at 1
        let model = relu_chain(1.0, 1.0);
        let patch = linear_patch(&[2.0]);
        let g = gradient_map(&model, &patch, 0).unwrap();
        let d = deconvnet_map(&model, &patch, 0).unwrap();
        let u = guided_backprop_map(&model, &patch, 0).unwrap();
        assert_eq!(g.values[(0, 0, 0)], 1.0);
        assert_eq!(d.values[(0, 0, 0)], 1.0);
        assert_eq!(u.values[(0, 0, 0)], 1.0);
    }

    #[test]
    fn relu_discriminators_forward_mask() {
        // y = relu(1*x) * (+1), x = -2: guided 0 (forward mask), deconvnet 1
        let model = relu_chain(1.0, 1.0);
        let patch = linear_patch(&[-2.0]);
        let g = gradient_map(&model, &patch, 0).unwrap();
        let d = deconvnet_map(&model, &patch, 0).unwrap();
        let u = guided_backprop_map(&model, &patch, 0).unwrap();
        assert_eq!(g.values[(0, 0, 0)], 0.0);
        assert_eq!(d.values[(0, 0, 0)], 1.0);
        assert_eq!(u.values[(0, 0, 0)], 0.0);
    }

    #[test]
    fn linear_model_without_relu_makes_all_signal_methods_agree() {
        let model = linear_model(&[0.7, -1.3, 0.4]);
        let patch = linear_patch(&[0.2, 0.9, -0.5]);
        let g = gradient_map(&model, &patch, 0).unwrap();
        let d = deconvnet_map(&model, &patch, 0).unwrap();
        let u = guided_backprop_map(&model, &patch, 0).unwrap();
        for i in 0..3 {
            assert_eq!(g.values[(0, i, 0)], d.values[(0, i, 0)]);
            assert_eq!(g.values[(0, i, 0)], u.values[(0, i, 0)]);
        }
    }

    #[test]
    fn deep_taylor_rejects_negative_inputs_and_handles_zero() {
        let model = small_cnn(1, 2, false, 8);
        let negative = Patch {
            data: Array3::from_elem((16, 16, 1), -0.5),
            ..linear_patch(&[0.0])
        };
        assert!(matches!(
            deep_taylor_map(&model, &negative, 0),
            Err(Error::NegativeInput)
        ));

        let zero = Patch {
            data: Array3::zeros((16, 16, 1)),
            ..linear_patch(&[0.0])
        };
        let map = deep_taylor_map(&model, &zero, 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_taylor_on_a_positive_linear_layer_is_proportional_to_xw() {
        // single positive-weight dense layer, x >= 0: map ~ x*w, sum = y
        let model = linear_model(&[2.0, 0.5]);
        let patch = linear_patch(&[0.25, 1.0]);
        let map = deep_taylor_map(&model, &patch, 0).unwrap();
        let y = 2.0 * 0.25 + 0.5;
        assert!((map.sum() - y).abs() < 1e-6);
        for (i, expected) in [0.5, 0.5].into_iter().enumerate() {
            assert!((map.values[(0, i, 0)] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn dispatcher_runs_all_nine_methods_shape_equal() {
        let model = small_cnn(1, 2, false, 12);
        let patch = Patch {
            data: Array3::from_shape_fn((16, 16, 1), |(r, c, _)| {
                ((r * 3 + c * 5) % 11) as f64 / 11.0
            }),
            ..linear_patch(&[0.0])
        };
        for method in MethodName::ALL {
            let map = explain(&model.clone(), &patch, method, 1).unwrap();
            assert_eq!(map.values.dim(), patch.data.dim(), "{method}");
            assert!(map.is_finite(), "{method}");
            assert_eq!(map.method, method);
            // determinism
            let again = explain(&model.clone(), &patch, method, 1).unwrap();
            assert_eq!(map.values, again.values, "{method}");
        }
    }

    #[test]
    fn conservation_residual_of_zero_map_with_zero_score() {
        let map = RelevanceMap {
            method: MethodName::LrpZ,
            values: Array3::zeros((2, 2, 1)),
            target_class: 0,
            target_score: 0.0,
            patch_ref: PatchRef {
                subject: "s".to_string(),
                origin_row: 0,
                origin_col: 0,
                channels: vec!["a".to_string()],
            },
        };
        assert_eq!(conservation_residual(&map), 0.0);
    }

    #[test]
    fn epsilon_residual_decreases_towards_the_z_rule() {
        let model = linear_model(&[1.0, -1.0]);
        let patch = linear_patch(&[2.0, 1.0]);
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-3, 1e-5, 1e-7] {
            let map = lrp_map(&model, &patch, 0, &LrpRuleConfig::uniform(Rule::Epsilon(eps)))
                .unwrap();
            let residual = conservation_residual(&map);
            assert!(residual <= last + 1e-12, "eps {eps}: {residual} > {last}");
            last = residual;
        }
        let z = lrp_map(&model, &patch, 0, &LrpRuleConfig::uniform(Rule::Z)).unwrap();
        assert!(conservation_residual(&z) < 1e-6);
    }

    #[test]
    fn relevance_map_round_trips_to_disk() {
        let model = linear_model(&[3.0, -2.0]);
        let patch = linear_patch(&[2.0, 1.0]);
        let map = explain(&model, &patch, MethodName::LrpZ, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (tensor_path, meta_path) =
            write_relevance_map(&map, &model.checksum(), dir.path(), "map0").unwrap();
        match tensorfile::read(&tensor_path).unwrap() {
            tensorfile::Tensor::F32(arr) => {
                assert_eq!(arr.shape(), &[1, 2, 1]);
                assert!((arr[[0, 0, 0]] as f64 - map.values[(0, 0, 0)]).abs() < 1e-6);
            }
            _ => panic!("expected f32 tensor"),
        }
        let meta = parse_relevance_meta(&fs::read_to_string(meta_path).unwrap()).unwrap();
        assert_eq!(meta.method, MethodName::LrpZ);
        assert_eq!(meta.model_checksum, model.checksum());
    }
}
