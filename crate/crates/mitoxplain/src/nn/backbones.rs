//! Backbone builders and input-channel adaptation for pretrained weights.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::layer::{BatchNorm, Conv2d, Dense, Layer, MaxPool, Residual};
use crate::nn::model::Model;

fn he_conv(
    rng: &mut ChaCha20Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Layer {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid sd");
    let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| normal.sample(rng));
    Layer::Conv2d(Conv2d {
        weight,
        bias: bias.then(|| Array1::zeros(c_out)),
        stride,
        padding,
    })
}

fn he_dense(rng: &mut ChaCha20Rng, out: usize, input: usize, bias: bool) -> Layer {
    let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid sd");
    let weight = Array2::from_shape_fn((out, input), |_| normal.sample(rng));
    Layer::Dense(Dense { weight, bias: bias.then(|| Array1::zeros(out)) })
}

/// Fixed 4-block CNN for CPU-scale runs: conv3x3 -> relu -> maxpool2 at
/// widths 16/32/64/128, then global average pooling and a 2-way head.
/// No batch normalisation; `bias = false` keeps every layer purely linear,
/// which makes relevance-conservation checks exact.
pub fn small_cnn(input_channels: usize, num_classes: usize, bias: bool, seed: u64) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = input_channels;
    for c_out in [16usize, 32, 64, 128] {
        layers.push(he_conv(&mut rng, c_out, c_in, 3, 1, 1, bias));
        layers.push(Layer::ReLU);
        layers.push(Layer::MaxPool(MaxPool { size: 2, stride: 2, padding: 0 }));
        c_in = c_out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(he_dense(&mut rng, num_classes, 128, bias));
    Model::new(layers, input_channels, num_classes)
}

/// VGG-16 feature stack with an average-pooling head.
pub fn vgg16(input_channels: usize, num_classes: usize, seed: u64) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut c_in = input_channels;
    for (c_out, reps) in [(64usize, 2usize), (128, 2), (256, 3), (512, 3), (512, 3)] {
        for _ in 0..reps {
            layers.push(he_conv(&mut rng, c_out, c_in, 3, 1, 1, true));
            layers.push(Layer::ReLU);
            c_in = c_out;
        }
        layers.push(Layer::MaxPool(MaxPool { size: 2, stride: 2, padding: 0 }));
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(he_dense(&mut rng, num_classes, 512, true));
    Model::new(layers, input_channels, num_classes)
}

fn bottleneck(
    rng: &mut ChaCha20Rng,
    c_in: usize,
    mid: usize,
    c_out: usize,
    stride: usize,
    project: bool,
) -> Vec<Layer> {
    let main = vec![
        he_conv(rng, mid, c_in, 1, stride, 0, false),
        Layer::BatchNorm(BatchNorm::identity(mid)),
        Layer::ReLU,
        he_conv(rng, mid, mid, 3, 1, 1, false),
        Layer::BatchNorm(BatchNorm::identity(mid)),
        Layer::ReLU,
        he_conv(rng, c_out, mid, 1, 1, 0, false),
        Layer::BatchNorm(BatchNorm::identity(c_out)),
    ];
    let shortcut = if project {
        vec![
            he_conv(rng, c_out, c_in, 1, stride, 0, false),
            Layer::BatchNorm(BatchNorm::identity(c_out)),
        ]
    } else {
        vec![]
    };
    vec![Layer::Residual(Residual { main, shortcut }), Layer::ReLU]
}

/// ResNet-50 with an average-pooling head. Batch-norm layers run frozen
/// (see [`BatchNorm`]); from random init their statistics are the identity.
pub fn resnet50(input_channels: usize, num_classes: usize, seed: u64) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = vec![
        he_conv(&mut rng, 64, input_channels, 7, 2, 3, false),
        Layer::BatchNorm(BatchNorm::identity(64)),
        Layer::ReLU,
        Layer::MaxPool(MaxPool { size: 3, stride: 2, padding: 1 }),
    ];
    let mut c_in = 64usize;
    for (stage, (mid, c_out, blocks)) in
        [(64usize, 256usize, 3usize), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)]
            .into_iter()
            .enumerate()
    {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let project = block == 0;
            layers.extend(bottleneck(&mut rng, c_in, mid, c_out, stride, project));
            c_in = c_out;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(he_dense(&mut rng, num_classes, 2048, true));
    Model::new(layers, input_channels, num_classes)
}

/// Adapt a pretrained 3-channel first convolution to `target_channels`.
///
/// * 3 channels: unchanged.
/// * 1 channel: the mean of the three pretrained slices.
/// * more than 3: the original slices plus mean-filled extras, all scaled by
///   `3 / target` so the expected pre-activation magnitude is preserved for
///   inputs with equal channel statistics.
/// * 2 channels: the first two slices, unscaled.
pub fn adapt_input_channels(pretrained: &Array4<f64>, target_channels: usize) -> Result<Array4<f64>> {
    let (c_out, c_in, kh, kw) = pretrained.dim();
    if c_in != 3 {
        return Err(Error::InvalidParameter(format!(
            "pretrained first layer has {c_in} input channels, expected 3"
        )));
    }
    if target_channels == 0 {
        return Err(Error::InvalidParameter("target_channels must be >= 1".to_string()));
    }
    if target_channels == 3 {
        return Ok(pretrained.clone());
    }
    let mean = pretrained.mean_axis(Axis(1)).expect("non-empty axis");
    let mut out = Array4::<f64>::zeros((c_out, target_channels, kh, kw));
    for c in 0..target_channels {
        let slice = if c < 3.min(target_channels) && target_channels >= 2 {
            pretrained.index_axis(Axis(1), c).to_owned()
        } else {
            mean.clone()
        };
        out.index_axis_mut(Axis(1), c).assign(&slice);
    }
    if target_channels == 1 {
        out.index_axis_mut(Axis(1), 0).assign(&mean);
    }
    if target_channels > 3 {
        out *= 3.0 / target_channels as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::softmax;
    use ndarray::Array3;

    #[test]
    fn small_cnn_outputs_valid_class_scores() {
        let model = small_cnn(1, 2, true, 1);
        let x = Array3::from_shape_fn((1, 32, 32), |(_, r, c)| ((r + c) % 7) as f64 / 7.0);
        let logits = model.forward(&x).unwrap();
        let probs = softmax(&logits);
        assert!((probs.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vgg16_and_resnet50_forward_at_small_resolution() {
        let x = Array3::from_shape_fn((3, 32, 32), |(c, r, w)| ((c + r + w) % 5) as f64 * 0.1);
        for model in [vgg16(3, 2, 7), resnet50(3, 2, 7)] {
            let logits = model.forward(&x).unwrap();
            assert_eq!(logits.len(), 2);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn resnet50_has_the_expected_conv_count() {
        let model = resnet50(3, 2, 0);
        fn count_convs(layers: &[Layer]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d(_) => 1,
                    Layer::Residual(r) => count_convs(&r.main) + count_convs(&r.shortcut),
                    _ => 0,
                })
                .sum()
        }
        // stem + 16 bottlenecks x 3 + 4 projections
        assert_eq!(count_convs(&model.layers), 53);
    }

    #[test]
    fn adapt_identity_mean_and_scaling() {
        let pre = Array4::from_shape_fn((2, 3, 3, 3), |(o, i, a, b)| {
            (o * 27 + i * 9 + a * 3 + b) as f64 * 0.01
        });
        // target 3: identity
        assert_eq!(adapt_input_channels(&pre, 3).unwrap(), pre);

        // target 1: channel mean of the three slices
        let one = adapt_input_channels(&pre, 1).unwrap();
        assert_eq!(one.dim(), (2, 1, 3, 3));
        let expected = (&pre.index_axis(Axis(1), 0).to_owned()
            + &pre.index_axis(Axis(1), 1)
            + pre.index_axis(Axis(1), 2))
            / 3.0;
        for o in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    assert!((one[(o, 0, a, b)] - expected[(o, a, b)]).abs() < 1e-12);
                }
            }
        }

        // target 10: per-output sum over input slices is preserved
        let ten = adapt_input_channels(&pre, 10).unwrap();
        assert_eq!(ten.dim(), (2, 10, 3, 3));
        for o in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let orig: f64 = (0..3).map(|i| pre[(o, i, a, b)]).sum();
                    let adapted: f64 = (0..10).map(|i| ten[(o, i, a, b)]).sum();
                    assert!(
                        (orig - adapted).abs() < 1e-6,
                        "sum mismatch at ({o},{a},{b}): {orig} vs {adapted}"
                    );
                }
            }
        }
        // extra slices all equal the scaled mean
        for o in 0..2 {
            for c in 3..10 {
                for a in 0..3 {
                    for b in 0..3 {
                        let m = expected[(o, a, b)] * 0.3;
                        assert!((ten[(o, c, a, b)] - m).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
