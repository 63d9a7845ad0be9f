//! Deep Taylor decomposition for ReLU networks on a [0, 1] input domain.
//!
//! Hidden linear layers redistribute through the z+ decomposition (positive
//! contributions only, biases ignored); the input-nearest linear layer uses
//! the box-constrained rule for the [0, 1] domain. This is a standalone
//! traversal, independent of the generic LRP engine, so the two can be
//! checked against each other.

use ndarray::{Array1, Array3, Axis};

use crate::error::{Error, Result};
use crate::explain::lrp::STABILIZER;
use crate::explain::trace::ActivationTrace;
use crate::nn::conv::{conv_backward_data, conv_forward};
use crate::nn::layer::maxpool_forward;
use crate::nn::{Feature, Layer};

fn stab(z: f64) -> f64 {
    if z >= 0.0 {
        z + STABILIZER
    } else {
        z - STABILIZER
    }
}

/// Relevance at the model input, shaped `(C, H, W)`.
///
/// Errors if the input carries negative values; normalise to [0, 1] first.
pub fn deep_taylor_backward(trace: &ActivationTrace, target_class: usize) -> Result<Array3<f64>> {
    match &trace.inputs[0] {
        Feature::Map(x) if x.iter().any(|&v| v < 0.0) => return Err(Error::NegativeInput),
        _ => {}
    }
    if target_class >= trace.logits.len() {
        return Err(Error::InvalidParameter(format!(
            "target class {target_class} out of range"
        )));
    }
    let first_linear = trace.first_linear_index();
    let mut seed = Array1::<f64>::zeros(trace.logits.len());
    seed[target_class] = trace.logits[target_class];
    let mut relevance = Feature::Vector(seed);

    for (index, layer) in trace.model.layers.iter().enumerate().rev() {
        let input = &trace.inputs[index];
        let is_first = first_linear == Some(index);
        relevance = match layer {
            Layer::Dense(dense) => {
                let r = relevance.as_vector()?;
                let x = input.as_vector()?;
                let w = &dense.weight;
                if is_first {
                    // z^B rule on [0, 1]: numerator x_i w_ij - hi * w_ij^-
                    // (the lo = 0 bound removes the w+ term)
                    let wn = w.mapv(|v| v.min(0.0));
                    let ones = Array1::<f64>::ones(x.len());
                    let z = w.dot(x) - wn.dot(&ones);
                    let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z));
                    Feature::Vector(x * &w.t().dot(&s) - &ones * &wn.t().dot(&s))
                } else {
                    // z+ rule: nonnegative hidden activations, positive weights
                    let wp = w.mapv(|v| v.max(0.0));
                    let z = wp.dot(x);
                    let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z));
                    Feature::Vector(x * &wp.t().dot(&s))
                }
            }
            Layer::Conv2d(conv) => {
                let r = relevance.as_map()?;
                let x = input.as_map()?;
                let w = &conv.weight;
                let (stride, padding) = (conv.stride, conv.padding);
                if is_first {
                    let wn = w.mapv(|v| v.min(0.0));
                    let ones = Array3::<f64>::ones(x.dim());
                    let z = conv_forward(x, w, None, stride, padding)
                        - conv_forward(&ones, &wn, None, stride, padding);
                    let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z));
                    let full = x * &conv_backward_data(&s, w, x.dim(), stride, padding);
                    let bound = &ones * &conv_backward_data(&s, &wn, x.dim(), stride, padding);
                    Feature::Map(full - bound)
                } else {
                    let wp = w.mapv(|v| v.max(0.0));
                    let z = conv_forward(x, &wp, None, stride, padding);
                    let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z));
                    Feature::Map(x * &conv_backward_data(&s, &wp, x.dim(), stride, padding))
                }
            }
            Layer::ReLU => relevance,
            Layer::MaxPool(pool) => {
                let r = relevance.as_map()?;
                let x = input.as_map()?;
                let (_, winners) = maxpool_forward(x, pool);
                let mut out = Array3::<f64>::zeros(x.dim());
                let slice = out.as_slice_mut().expect("standard layout");
                for (&win, &rv) in winners.iter().zip(r.iter()) {
                    slice[win] += rv;
                }
                Feature::Map(out)
            }
            Layer::GlobalAvgPool => {
                let r = relevance.as_vector()?;
                let x = input.as_map()?;
                let (c, h, w) = x.dim();
                let n = (h * w) as f64;
                let mut out = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let z = x.index_axis(Axis(0), ci).sum() / n;
                    let scale = r[ci] / (n * stab(z));
                    out.index_axis_mut(Axis(0), ci)
                        .assign(&x.index_axis(Axis(0), ci).mapv(|v| v * scale));
                }
                Feature::Map(out)
            }
            Layer::Flatten => {
                let r = relevance.as_vector()?;
                let x = input.as_map()?;
                Feature::Map(
                    Array3::from_shape_vec(x.dim(), r.to_vec())
                        .map_err(|e| Error::Decode(e.to_string()))?,
                )
            }
            other => {
                return Err(Error::UnsupportedLayer { index, kind: other.kind().to_string() })
            }
        };
    }
    relevance.as_map().cloned()
}
