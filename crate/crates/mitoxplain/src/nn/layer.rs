//! Layer graph: a model is a chain of layers; residual blocks nest two
//! sub-chains. Forward and backward are implemented per layer; backward
//! accumulates parameter gradients into a structurally identical
//! "gradient twin" of the layer (see [`Layer::zeros_like`]).

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::nn::conv;

/// Data flowing between layers: a feature map `(C, H, W)` or a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature {
    Map(Array3<f64>),
    Vector(Array1<f64>),
}

impl Feature {
    pub fn shape_string(&self) -> String {
        match self {
            Feature::Map(a) => format!("map {:?}", a.dim()),
            Feature::Vector(v) => format!("vector [{}]", v.len()),
        }
    }

    pub fn as_map(&self) -> Result<&Array3<f64>> {
        match self {
            Feature::Map(a) => Ok(a),
            Feature::Vector(_) => Err(Error::ShapeMismatch {
                expected: "feature map".to_string(),
                found: self.shape_string(),
            }),
        }
    }

    pub fn as_vector(&self) -> Result<&Array1<f64>> {
        match self {
            Feature::Vector(v) => Ok(v),
            Feature::Map(_) => Err(Error::ShapeMismatch {
                expected: "vector".to_string(),
                found: self.shape_string(),
            }),
        }
    }

    pub fn zeros_like(&self) -> Feature {
        match self {
            Feature::Map(a) => Feature::Map(Array3::zeros(a.dim())),
            Feature::Vector(v) => Feature::Vector(Array1::zeros(v.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(C_out, C_in, kh, kw)`
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Batch normalisation running in frozen (inference) mode: inputs are
/// normalised with the stored running statistics both at inference and
/// during fine-tuning; gamma/beta remain trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub main: Vec<Layer>,
    /// Empty = identity shortcut.
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    ReLU,
    MaxPool(MaxPool),
    GlobalAvgPool,
    Flatten,
    BatchNorm(BatchNorm),
    Residual(Residual),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::ReLU => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn forward(&self, input: &Feature) -> Result<Feature> {
        match self {
            Layer::Conv2d(conv) => {
                let x = input.as_map()?;
                if x.dim().0 != conv.weight.dim().1 {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} input channels", conv.weight.dim().1),
                        found: input.shape_string(),
                    });
                }
                Ok(Feature::Map(conv::conv_forward(
                    x,
                    &conv.weight,
                    conv.bias.as_ref(),
                    conv.stride,
                    conv.padding,
                )))
            }
            Layer::Dense(dense) => {
                let x = input.as_vector()?;
                if x.len() != dense.weight.dim().1 {
                    return Err(Error::ShapeMismatch {
                        expected: format!("vector [{}]", dense.weight.dim().1),
                        found: input.shape_string(),
                    });
                }
                let mut y = dense.weight.dot(x);
                if let Some(b) = &dense.bias {
                    y += b;
                }
                Ok(Feature::Vector(y))
            }
            Layer::ReLU => Ok(match input {
                Feature::Map(a) => Feature::Map(a.mapv(|v| v.max(0.0))),
                Feature::Vector(v) => Feature::Vector(v.mapv(|v| v.max(0.0))),
            }),
            Layer::MaxPool(pool) => {
                let x = input.as_map()?;
                let (out, _) = maxpool_forward(x, pool);
                Ok(Feature::Map(out))
            }
            Layer::GlobalAvgPool => {
                let x = input.as_map()?;
                let (_, h, w) = x.dim();
                let scale = 1.0 / (h * w) as f64;
                let pooled = x.sum_axis(Axis(2)).sum_axis(Axis(1)) * scale;
                Ok(Feature::Vector(pooled))
            }
            Layer::Flatten => {
                let x = input.as_map()?;
                Ok(Feature::Vector(Array1::from_iter(x.iter().copied())))
            }
            Layer::BatchNorm(bn) => {
                let x = input.as_map()?;
                let mut y = x.clone();
                for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
                    let scale = bn.gamma[c] / (bn.running_var[c] + bn.eps).sqrt();
                    let shift = bn.beta[c] - bn.running_mean[c] * scale;
                    plane.mapv_inplace(|v| v * scale + shift);
                }
                Ok(Feature::Map(y))
            }
            Layer::Residual(res) => {
                let main = forward_chain(&res.main, input)?;
                let short = forward_chain(&res.shortcut, input)?;
                match (main, short) {
                    (Feature::Map(a), Feature::Map(b)) => {
                        if a.dim() != b.dim() {
                            return Err(Error::ShapeMismatch {
                                expected: format!("map {:?}", a.dim()),
                                found: format!("map {:?}", b.dim()),
                            });
                        }
                        Ok(Feature::Map(a + b))
                    }
                    (Feature::Vector(a), Feature::Vector(b)) => Ok(Feature::Vector(a + b)),
                    (a, b) => Err(Error::ShapeMismatch {
                        expected: a.shape_string(),
                        found: b.shape_string(),
                    }),
                }
            }
        }
    }

    /// Gradient of the loss with respect to this layer's input, given the
    /// gradient at its output. Parameter gradients accumulate into `grad`,
    /// a zeroed structural twin of `self`.
    pub fn backward(&self, input: &Feature, grad_out: &Feature, grad: &mut Layer) -> Result<Feature> {
        match (self, grad) {
            (Layer::Conv2d(conv), Layer::Conv2d(gconv)) => {
                let x = input.as_map()?;
                let g = grad_out.as_map()?;
                let (gw, gb) =
                    conv::conv_backward_params(x, g, conv.weight.dim(), conv.stride, conv.padding);
                gconv.weight += &gw;
                if let Some(bias_grad) = gconv.bias.as_mut() {
                    *bias_grad += &gb;
                }
                Ok(Feature::Map(conv::conv_backward_data(
                    g,
                    &conv.weight,
                    x.dim(),
                    conv.stride,
                    conv.padding,
                )))
            }
            (Layer::Dense(dense), Layer::Dense(gdense)) => {
                let x = input.as_vector()?;
                let g = grad_out.as_vector()?;
                for (i, &gi) in g.iter().enumerate() {
                    for (j, &xj) in x.iter().enumerate() {
                        gdense.weight[(i, j)] += gi * xj;
                    }
                }
                if let Some(bias_grad) = gdense.bias.as_mut() {
                    *bias_grad += g;
                }
                Ok(Feature::Vector(dense.weight.t().dot(g)))
            }
            (Layer::ReLU, _) => Ok(match (input, grad_out) {
                (Feature::Map(x), Feature::Map(g)) => {
                    Feature::Map(ndarray::Zip::from(x).and(g).map_collect(|&x, &g| {
                        if x > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }))
                }
                (Feature::Vector(x), Feature::Vector(g)) => {
                    Feature::Vector(ndarray::Zip::from(x).and(g).map_collect(|&x, &g| {
                        if x > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }))
                }
                _ => {
                    return Err(Error::ShapeMismatch {
                        expected: input.shape_string(),
                        found: grad_out.shape_string(),
                    })
                }
            }),
            (Layer::MaxPool(pool), _) => {
                let x = input.as_map()?;
                let g = grad_out.as_map()?;
                let (_, winners) = maxpool_forward(x, pool);
                let mut gx = Array3::<f64>::zeros(x.dim());
                let gxs = gx.as_slice_mut().expect("standard layout");
                for (&win, &gv) in winners.iter().zip(g.iter()) {
                    gxs[win] += gv;
                }
                Ok(Feature::Map(gx))
            }
            (Layer::GlobalAvgPool, _) => {
                let x = input.as_map()?;
                let g = grad_out.as_vector()?;
                let (c, h, w) = x.dim();
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for (ci, mut plane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    plane.fill(g[ci] * scale);
                }
                Ok(Feature::Map(gx))
            }
            (Layer::Flatten, _) => {
                let x = input.as_map()?;
                let g = grad_out.as_vector()?;
                let gx = Array3::from_shape_vec(x.dim(), g.to_vec())
                    .map_err(|e| Error::Decode(e.to_string()))?;
                Ok(Feature::Map(gx))
            }
            (Layer::BatchNorm(bn), Layer::BatchNorm(gbn)) => {
                let x = input.as_map()?;
                let g = grad_out.as_map()?;
                let mut gx = g.clone();
                for c in 0..bn.gamma.len() {
                    let inv_sd = 1.0 / (bn.running_var[c] + bn.eps).sqrt();
                    let scale = bn.gamma[c] * inv_sd;
                    let mut ggamma = 0.0;
                    let mut gbeta = 0.0;
                    for (xv, gv) in x.index_axis(Axis(0), c).iter().zip(g.index_axis(Axis(0), c)) {
                        ggamma += gv * (xv - bn.running_mean[c]) * inv_sd;
                        gbeta += gv;
                    }
                    gbn.gamma[c] += ggamma;
                    gbn.beta[c] += gbeta;
                    gx.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * scale);
                }
                Ok(Feature::Map(gx))
            }
            (Layer::Residual(res), Layer::Residual(gres)) => {
                let g_main = backward_chain(&res.main, &mut gres.main, input, grad_out)?;
                let g_short = backward_chain(&res.shortcut, &mut gres.shortcut, input, grad_out)?;
                match (g_main, g_short) {
                    (Feature::Map(a), Feature::Map(b)) => Ok(Feature::Map(a + b)),
                    (Feature::Vector(a), Feature::Vector(b)) => Ok(Feature::Vector(a + b)),
                    (a, b) => Err(Error::ShapeMismatch {
                        expected: a.shape_string(),
                        found: b.shape_string(),
                    }),
                }
            }
            _ => unreachable!("gradient twin structurally matches the layer"),
        }
    }

    /// A structurally identical layer with all parameters zeroed; used as a
    /// gradient accumulator and as Adam moment state.
    pub fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: Array4::zeros(c.weight.dim()),
                bias: c.bias.as_ref().map(|b| Array1::zeros(b.len())),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                weight: Array2::zeros(d.weight.dim()),
                bias: d.bias.as_ref().map(|b| Array1::zeros(b.len())),
            }),
            Layer::ReLU => Layer::ReLU,
            Layer::MaxPool(p) => Layer::MaxPool(p.clone()),
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Flatten => Layer::Flatten,
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                gamma: Array1::zeros(bn.gamma.len()),
                beta: Array1::zeros(bn.beta.len()),
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
                eps: bn.eps,
            }),
            Layer::Residual(r) => Layer::Residual(Residual {
                main: r.main.iter().map(Layer::zeros_like).collect(),
                shortcut: r.shortcut.iter().map(Layer::zeros_like).collect(),
            }),
        }
    }

    /// Visit every trainable parameter slice, depth-first.
    pub fn visit_params(&self, visit: &mut impl FnMut(&[f64])) {
        match self {
            Layer::Conv2d(c) => {
                visit(c.weight.as_slice().expect("standard layout"));
                if let Some(b) = &c.bias {
                    visit(b.as_slice().expect("standard layout"));
                }
            }
            Layer::Dense(d) => {
                visit(d.weight.as_slice().expect("standard layout"));
                if let Some(b) = &d.bias {
                    visit(b.as_slice().expect("standard layout"));
                }
            }
            Layer::BatchNorm(bn) => {
                visit(bn.gamma.as_slice().expect("standard layout"));
                visit(bn.beta.as_slice().expect("standard layout"));
            }
            Layer::Residual(r) => {
                for l in &r.main {
                    l.visit_params(visit);
                }
                for l in &r.shortcut {
                    l.visit_params(visit);
                }
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, visit: &mut impl FnMut(&mut [f64])) {
        match self {
            Layer::Conv2d(c) => {
                visit(c.weight.as_slice_mut().expect("standard layout"));
                if let Some(b) = &mut c.bias {
                    visit(b.as_slice_mut().expect("standard layout"));
                }
            }
            Layer::Dense(d) => {
                visit(d.weight.as_slice_mut().expect("standard layout"));
                if let Some(b) = &mut d.bias {
                    visit(b.as_slice_mut().expect("standard layout"));
                }
            }
            Layer::BatchNorm(bn) => {
                visit(bn.gamma.as_slice_mut().expect("standard layout"));
                visit(bn.beta.as_slice_mut().expect("standard layout"));
            }
            Layer::Residual(r) => {
                for l in &mut r.main {
                    l.visit_params_mut(visit);
                }
                for l in &mut r.shortcut {
                    l.visit_params_mut(visit);
                }
            }
            _ => {}
        }
    }
}

/// Run a sub-chain forward (identity for an empty chain).
pub fn forward_chain(layers: &[Layer], input: &Feature) -> Result<Feature> {
    let mut current = input.clone();
    for layer in layers {
        current = layer.forward(&current)?;
    }
    Ok(current)
}

/// Backward through a sub-chain, recomputing intermediate inputs.
fn backward_chain(
    layers: &[Layer],
    grads: &mut [Layer],
    input: &Feature,
    grad_out: &Feature,
) -> Result<Feature> {
    // recompute the forward activations of the chain
    let mut inputs = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        inputs.push(current.clone());
        current = layer.forward(&current)?;
    }
    let mut g = grad_out.clone();
    for ((layer, glayer), layer_input) in layers
        .iter()
        .zip(grads.iter_mut())
        .zip(inputs.iter())
        .rev()
    {
        g = layer.backward(layer_input, &g, glayer)?;
    }
    Ok(g)
}

/// Max-pool forward returning both the output and, per output element, the
/// flat input index of the winning pixel (first index wins ties).
pub fn maxpool_forward(x: &Array3<f64>, pool: &MaxPool) -> (Array3<f64>, Vec<usize>) {
    let (channels, height, width) = x.dim();
    let h_out = conv::out_dim(height, pool.size, pool.stride, pool.padding);
    let w_out = conv::out_dim(width, pool.size, pool.stride, pool.padding);
    let mut out = Array3::<f64>::zeros((channels, h_out, w_out));
    let mut winners = Vec::with_capacity(channels * h_out * w_out);
    let xs = x.as_slice().expect("standard layout");
    for c in 0..channels {
        for ho in 0..h_out {
            for wo in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..pool.size {
                    let r = (ho * pool.stride + ki) as isize - pool.padding as isize;
                    if r < 0 || r >= height as isize {
                        continue;
                    }
                    for kj in 0..pool.size {
                        let cc = (wo * pool.stride + kj) as isize - pool.padding as isize;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        let idx = c * height * width + r as usize * width + cc as usize;
                        let v = xs[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                debug_assert_ne!(best_idx, usize::MAX, "pool window fully outside input");
                out[(c, ho, wo)] = best;
                winners.push(best_idx);
            }
        }
    }
    (out, winners)
}
