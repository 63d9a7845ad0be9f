//! Recorded forward passes.
//!
//! Every explanation method runs as an explicit walk over an
//! [`ActivationTrace`]: the folded chain model plus each layer's input and
//! output. Recording once and traversing the trace keeps the backward rules
//! auditable against hand examples and avoids re-running the network.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::nn::{softmax, Conv2d, Feature, Layer, Model};
use crate::patch::Patch;
use crate::trainer::{patch_to_input, ClassScores};

/// A forward pass with per-layer activations, sufficient to run any
/// backward rule without touching the model again.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// Chain model with batch-norm folded into the preceding convolutions.
    pub model: Model,
    /// Input to each layer (`a_l`).
    pub inputs: Vec<Feature>,
    /// Output of each layer (`z_l` for linear layers).
    pub outputs: Vec<Feature>,
    pub logits: Array1<f64>,
}

impl ActivationTrace {
    /// Re-run the folded model on the recorded input.
    pub fn replay(&self) -> Result<Array1<f64>> {
        match &self.inputs[0] {
            Feature::Map(x) => self.model.forward(x),
            Feature::Vector(_) => Err(Error::ShapeMismatch {
                expected: "map input".to_string(),
                found: "vector".to_string(),
            }),
        }
    }

    /// Index of the input-nearest linear (conv or dense) layer.
    pub fn first_linear_index(&self) -> Option<usize> {
        self.model
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv2d(_) | Layer::Dense(_)))
    }
}

/// Fold frozen batch-norm layers into the convolution directly before them.
///
/// Relevance rules are defined over plain linear layers, so explanation
/// always runs on the folded chain. Residual blocks are not supported by
/// the explanation engine and are reported as such.
pub fn fold_batchnorm(model: &Model) -> Result<Model> {
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers.len());
    for (index, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => {
                match layers.last_mut() {
                    Some(Layer::Conv2d(conv)) => {
                        fold_into_conv(conv, bn);
                    }
                    _ => {
                        return Err(Error::UnsupportedLayer {
                            index,
                            kind: "batchnorm without preceding convolution".to_string(),
                        })
                    }
                }
            }
            Layer::Residual(_) => {
                return Err(Error::UnsupportedLayer { index, kind: "residual".to_string() })
            }
            other => layers.push(other.clone()),
        }
    }
    Ok(Model::new(layers, model.input_channels, model.num_classes))
}

fn fold_into_conv(conv: &mut Conv2d, bn: &crate::nn::BatchNorm) {
    let c_out = conv.weight.dim().0;
    let mut bias = conv
        .bias
        .take()
        .unwrap_or_else(|| Array1::zeros(c_out));
    for o in 0..c_out {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
        conv.weight
            .index_axis_mut(ndarray::Axis(0), o)
            .mapv_inplace(|v| v * scale);
        bias[o] = (bias[o] - bn.running_mean[o]) * scale + bn.beta[o];
    }
    conv.bias = Some(bias);
}

/// Run the model on a patch, recording every layer's input and output.
pub fn record_forward(model: &Model, patch: &Patch) -> Result<(ClassScores, ActivationTrace)> {
    if patch.num_channels() != model.input_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", model.input_channels),
            found: format!("{} channels", patch.num_channels()),
        });
    }
    let folded = fold_batchnorm(model)?;
    let x = patch_to_input(patch);
    let mut inputs = Vec::with_capacity(folded.layers.len());
    let mut outputs = Vec::with_capacity(folded.layers.len());
    let mut current = Feature::Map(x);
    for layer in &folded.layers {
        inputs.push(current.clone());
        current = layer.forward(&current)?;
        outputs.push(current.clone());
    }
    let logits = current.as_vector()?.clone();
    let scores = ClassScores { probabilities: softmax(&logits), logits: logits.clone() };
    Ok((scores, ActivationTrace { model: folded, inputs, outputs, logits }))
}
