//! Gradient, deconvnet and guided-backprop signal maps.
//!
//! The three methods share one backward walk and differ only in how the
//! signal passes a ReLU:
//!
//! * gradient applies the forward mask (zero where the pre-activation
//!   was <= 0);
//! * deconvnet rectifies the incoming backward signal and ignores the mask;
//! * guided applies both: zero where the mask is off OR the signal is
//!   negative.

use ndarray::{Array1, Array3, Axis};

use crate::error::{Error, Result};
use crate::explain::trace::ActivationTrace;
use crate::nn::conv::conv_backward_data;
use crate::nn::layer::maxpool_forward;
use crate::nn::{Feature, Layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    Gradient,
    Deconvnet,
    Guided,
}

/// Backward signal at the input, shaped like the model input `(C, H, W)`.
pub fn saliency_backward(
    trace: &ActivationTrace,
    target_class: usize,
    rule: ReluRule,
) -> Result<Array3<f64>> {
    if target_class >= trace.logits.len() {
        return Err(Error::InvalidParameter(format!(
            "target class {target_class} out of range"
        )));
    }
    let mut seed = Array1::<f64>::zeros(trace.logits.len());
    seed[target_class] = 1.0;
    let mut g = Feature::Vector(seed);

    for (index, layer) in trace.model.layers.iter().enumerate().rev() {
        let input = &trace.inputs[index];
        g = match layer {
            Layer::Dense(dense) => {
                let gv = g.as_vector()?;
                Feature::Vector(dense.weight.t().dot(gv))
            }
            Layer::Conv2d(conv) => {
                let gm = g.as_map()?;
                let x = input.as_map()?;
                Feature::Map(conv_backward_data(
                    gm,
                    &conv.weight,
                    x.dim(),
                    conv.stride,
                    conv.padding,
                ))
            }
            Layer::ReLU => relu_backward(input, &g, rule)?,
            Layer::MaxPool(pool) => {
                let gm = g.as_map()?;
                let x = input.as_map()?;
                let (_, winners) = maxpool_forward(x, pool);
                let mut gx = Array3::<f64>::zeros(x.dim());
                let gxs = gx.as_slice_mut().expect("standard layout");
                for (&win, &gv) in winners.iter().zip(gm.iter()) {
                    gxs[win] += gv;
                }
                Feature::Map(gx)
            }
            Layer::GlobalAvgPool => {
                let gv = g.as_vector()?;
                let x = input.as_map()?;
                let (c, h, w) = x.dim();
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for (ci, mut plane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    plane.fill(gv[ci] * scale);
                }
                Feature::Map(gx)
            }
            Layer::Flatten => {
                let gv = g.as_vector()?;
                let x = input.as_map()?;
                Feature::Map(
                    Array3::from_shape_vec(x.dim(), gv.to_vec())
                        .map_err(|e| Error::Decode(e.to_string()))?,
                )
            }
            other => {
                return Err(Error::UnsupportedLayer { index, kind: other.kind().to_string() })
            }
        };
    }
    g.as_map().cloned()
}

fn relu_backward(input: &Feature, g: &Feature, rule: ReluRule) -> Result<Feature> {
    let combine = |x: f64, g: f64| -> f64 {
        match rule {
            ReluRule::Gradient => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            ReluRule::Deconvnet => g.max(0.0),
            ReluRule::Guided => {
                if x > 0.0 {
                    g.max(0.0)
                } else {
                    0.0
                }
            }
        }
    };
    Ok(match (input, g) {
        (Feature::Map(x), Feature::Map(g)) => {
            Feature::Map(ndarray::Zip::from(x).and(g).map_collect(|&x, &g| combine(x, g)))
        }
        (Feature::Vector(x), Feature::Vector(g)) => {
            Feature::Vector(ndarray::Zip::from(x).and(g).map_collect(|&x, &g| combine(x, g)))
        }
        _ => {
            return Err(Error::ShapeMismatch {
                expected: input.shape_string(),
                found: g.shape_string(),
            })
        }
    })
}
