//! Model container, softmax head and binary serialisation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};

use crate::checksum::sha256_hex;
use crate::error::{Error, Result};
use crate::nn::layer::{BatchNorm, Conv2d, Dense, Feature, Layer, MaxPool, Residual};

/// A chain of layers ending in a `num_classes`-way linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    pub num_classes: usize,
}

impl Model {
    pub fn new(layers: Vec<Layer>, input_channels: usize, num_classes: usize) -> Model {
        Model { layers, input_channels, num_classes }
    }

    /// Forward pass; input is `(C, H, W)`, output the pre-softmax logits.
    pub fn forward(&self, input: &Array3<f64>) -> Result<Array1<f64>> {
        if input.dim().0 != self.input_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.input_channels),
                found: format!("{}", input.dim().0),
            });
        }
        let mut current = Feature::Map(input.clone());
        for layer in &self.layers {
            current = layer.forward(&current)?;
        }
        Ok(current.as_vector()?.clone())
    }

    /// Forward pass that also returns each layer's input, for backprop.
    pub fn forward_recorded(&self, input: &Array3<f64>) -> Result<(Vec<Feature>, Array1<f64>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = Feature::Map(input.clone());
        for layer in &self.layers {
            inputs.push(current.clone());
            current = layer.forward(&current)?;
        }
        Ok((inputs, current.as_vector()?.clone()))
    }

    /// Backpropagate `grad_logits`, accumulating parameter gradients into
    /// `grads` (a [`Model::zeros_like`] twin). Returns the input gradient.
    pub fn backward(
        &self,
        inputs: &[Feature],
        grad_logits: &Array1<f64>,
        grads: &mut Model,
    ) -> Result<Array3<f64>> {
        let mut g = Feature::Vector(grad_logits.clone());
        for ((layer, glayer), input) in self
            .layers
            .iter()
            .zip(grads.layers.iter_mut())
            .zip(inputs.iter())
            .rev()
        {
            g = layer.backward(input, &g, glayer)?;
        }
        Ok(g.as_map()?.clone())
    }

    pub fn zeros_like(&self) -> Model {
        Model {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            input_channels: self.input_channels,
            num_classes: self.num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for layer in &self.layers {
            layer.visit_params(&mut |slice| count += slice.len());
        }
        count
    }

    /// SHA-256 over the serialised model; stable across runs.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        encode_model(self, &mut bytes).expect("in-memory encode");
        sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        let mut bytes = Vec::new();
        encode_model(self, &mut bytes)?;
        writer.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut reader = BufReader::new(File::open(path)?);
        decode_model(&mut reader)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

// --- binary format -------------------------------------------------------
//
//   magic "MXM1" | u32 input_channels | u32 num_classes | u16 n_layers
//   then per layer a u8 tag and its fields; f64 data little-endian.

const MAGIC: [u8; 4] = *b"MXM1";
const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_GAP: u8 = 5;
const TAG_FLATTEN: u8 = 6;
const TAG_BATCHNORM: u8 = 7;
const TAG_RESIDUAL: u8 = 8;

/// Decoder caps, so corrupt headers cannot trigger huge allocations.
const MAX_DIM: u64 = 1 << 20;
const MAX_PARAMS: u64 = 1 << 27;
const MAX_LAYERS: u16 = 4096;

fn encode_model(model: &Model, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(model.input_channels as u32).to_le_bytes());
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    encode_layers(&model.layers, out)?;
    Ok(())
}

fn encode_layers(layers: &[Layer], out: &mut Vec<u8>) -> Result<()> {
    let n = u16::try_from(layers.len())
        .map_err(|_| Error::InvalidParameter("too many layers".to_string()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for layer in layers {
        encode_layer(layer, out)?;
    }
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_layer(layer: &Layer, out: &mut Vec<u8>) -> Result<()> {
    match layer {
        Layer::Conv2d(c) => {
            out.push(TAG_CONV);
            let (o, i, kh, kw) = c.weight.dim();
            for d in [o, i, kh, kw, c.stride, c.padding] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(u8::from(c.bias.is_some()));
            push_f64s(out, c.weight.as_slice().expect("standard layout"));
            if let Some(b) = &c.bias {
                push_f64s(out, b.as_slice().expect("standard layout"));
            }
        }
        Layer::Dense(d) => {
            out.push(TAG_DENSE);
            let (o, i) = d.weight.dim();
            out.extend_from_slice(&(o as u32).to_le_bytes());
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.push(u8::from(d.bias.is_some()));
            push_f64s(out, d.weight.as_slice().expect("standard layout"));
            if let Some(b) = &d.bias {
                push_f64s(out, b.as_slice().expect("standard layout"));
            }
        }
        Layer::ReLU => out.push(TAG_RELU),
        Layer::MaxPool(p) => {
            out.push(TAG_MAXPOOL);
            for d in [p.size, p.stride, p.padding] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        Layer::GlobalAvgPool => out.push(TAG_GAP),
        Layer::Flatten => out.push(TAG_FLATTEN),
        Layer::BatchNorm(bn) => {
            out.push(TAG_BATCHNORM);
            out.extend_from_slice(&(bn.gamma.len() as u32).to_le_bytes());
            out.extend_from_slice(&bn.eps.to_le_bytes());
            for arr in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                push_f64s(out, arr.as_slice().expect("standard layout"));
            }
        }
        Layer::Residual(r) => {
            out.push(TAG_RESIDUAL);
            encode_layers(&r.main, out)?;
            encode_layers(&r.shortcut, out)?;
        }
    }
    Ok(())
}

/// Decode a model from a reader; safe on untrusted input.
pub fn decode_model<R: Read>(reader: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Decode("bad model magic".to_string()));
    }
    let input_channels = read_u32(reader)? as usize;
    let num_classes = read_u32(reader)? as usize;
    let layers = decode_layers(reader, 0)?;
    Ok(Model { layers, input_channels, num_classes })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_f64s<R: Read>(r: &mut R, count: u64) -> Result<Vec<f64>> {
    if count > MAX_PARAMS {
        return Err(Error::Decode(format!("parameter block of {count} exceeds cap")));
    }
    let mut out = vec![0f64; count as usize];
    let mut buf = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(out)
}

fn checked_dim<R: Read>(r: &mut R) -> Result<u64> {
    let d = read_u32(r)? as u64;
    if d > MAX_DIM {
        return Err(Error::Decode(format!("dimension {d} exceeds cap")));
    }
    Ok(d)
}

fn decode_layers<R: Read>(r: &mut R, depth: usize) -> Result<Vec<Layer>> {
    if depth > 4 {
        return Err(Error::Decode("residual nesting too deep".to_string()));
    }
    let n = read_u16(r)?;
    if n > MAX_LAYERS {
        return Err(Error::Decode(format!("layer count {n} exceeds cap")));
    }
    let mut layers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        layers.push(decode_layer(r, depth)?);
    }
    Ok(layers)
}

fn decode_layer<R: Read>(r: &mut R, depth: usize) -> Result<Layer> {
    match read_u8(r)? {
        TAG_CONV => {
            let o = checked_dim(r)?;
            let i = checked_dim(r)?;
            let kh = checked_dim(r)?;
            let kw = checked_dim(r)?;
            let stride = read_u32(r)? as usize;
            let padding = read_u32(r)? as usize;
            if stride == 0 {
                return Err(Error::Decode("conv stride 0".to_string()));
            }
            let has_bias = read_u8(r)? != 0;
            let count = o
                .checked_mul(i)
                .and_then(|v| v.checked_mul(kh))
                .and_then(|v| v.checked_mul(kw))
                .ok_or_else(|| Error::Decode("weight size overflows".to_string()))?;
            let weight = Array4::from_shape_vec(
                (o as usize, i as usize, kh as usize, kw as usize),
                read_f64s(r, count)?,
            )
            .map_err(|e| Error::Decode(e.to_string()))?;
            let bias = if has_bias {
                Some(Array1::from_vec(read_f64s(r, o)?))
            } else {
                None
            };
            Ok(Layer::Conv2d(Conv2d { weight, bias, stride, padding }))
        }
        TAG_DENSE => {
            let o = checked_dim(r)?;
            let i = checked_dim(r)?;
            let has_bias = read_u8(r)? != 0;
            let count = o
                .checked_mul(i)
                .ok_or_else(|| Error::Decode("weight size overflows".to_string()))?;
            let weight = Array2::from_shape_vec((o as usize, i as usize), read_f64s(r, count)?)
                .map_err(|e| Error::Decode(e.to_string()))?;
            let bias = if has_bias {
                Some(Array1::from_vec(read_f64s(r, o)?))
            } else {
                None
            };
            Ok(Layer::Dense(Dense { weight, bias }))
        }
        TAG_RELU => Ok(Layer::ReLU),
        TAG_MAXPOOL => {
            let size = read_u32(r)? as usize;
            let stride = read_u32(r)? as usize;
            let padding = read_u32(r)? as usize;
            if size == 0 || stride == 0 || padding >= size {
                return Err(Error::Decode("bad pool geometry".to_string()));
            }
            Ok(Layer::MaxPool(MaxPool { size, stride, padding }))
        }
        TAG_GAP => Ok(Layer::GlobalAvgPool),
        TAG_FLATTEN => Ok(Layer::Flatten),
        TAG_BATCHNORM => {
            let c = checked_dim(r)?;
            let mut eps_buf = [0u8; 8];
            r.read_exact(&mut eps_buf)?;
            let eps = f64::from_le_bytes(eps_buf);
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Decode("bad batchnorm eps".to_string()));
            }
            let gamma = Array1::from_vec(read_f64s(r, c)?);
            let beta = Array1::from_vec(read_f64s(r, c)?);
            let running_mean = Array1::from_vec(read_f64s(r, c)?);
            let running_var = Array1::from_vec(read_f64s(r, c)?);
            Ok(Layer::BatchNorm(BatchNorm { gamma, beta, running_mean, running_var, eps }))
        }
        TAG_RESIDUAL => {
            let main = decode_layers(r, depth + 1)?;
            let shortcut = decode_layers(r, depth + 1)?;
            Ok(Layer::Residual(Residual { main, shortcut }))
        }
        other => Err(Error::Decode(format!("unknown layer tag {other}"))),
    }
}

/// Decode from raw bytes (fuzzable entry point).
pub fn decode_model_bytes(bytes: &[u8]) -> Result<Model> {
    decode_model(&mut std::io::Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_model() -> Model {
        Model::new(
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Array4::from_shape_fn((2, 1, 3, 3), |(o, _, a, b)| {
                        (o + a + b) as f64 * 0.1 - 0.2
                    }),
                    bias: Some(array![0.1, -0.1]),
                    stride: 1,
                    padding: 1,
                }),
                Layer::ReLU,
                Layer::GlobalAvgPool,
                Layer::Dense(Dense {
                    weight: array![[0.5, -0.5], [0.25, 0.75]],
                    bias: None,
                }),
            ],
            1,
            2,
        )
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mxm");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.checksum(), model.checksum());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&array![1.0, -2.0, 0.5]);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_model_bytes(b"MXM1").is_err());
        assert!(decode_model_bytes(b"XXXX\x01\x00\x00\x00").is_err());
        // conv layer with absurd dimensions
        let mut evil = Vec::new();
        evil.extend_from_slice(b"MXM1");
        evil.extend_from_slice(&1u32.to_le_bytes());
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(&1u16.to_le_bytes());
        evil.push(1); // conv tag
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_model_bytes(&evil).is_err());
    }

    #[test]
    fn backward_weight_gradients_match_finite_differences() {
        use rand::prelude::*;
        use rand_chacha::ChaCha20Rng;
        let model = tiny_model();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((1, 5, 5), |_| rng.random::<f64>());
        // scalar objective: logit difference
        let objective = |m: &Model| {
            let y = m.forward(&x).unwrap();
            y[0] - 0.3 * y[1]
        };
        let (inputs, _) = model.forward_recorded(&x).unwrap();
        let mut grads = model.zeros_like();
        model
            .backward(&inputs, &array![1.0, -0.3], &mut grads)
            .unwrap();

        // flatten analytic grads, then finite-difference each parameter
        let mut analytic = Vec::new();
        for layer in &grads.layers {
            layer.visit_params(&mut |s| analytic.extend_from_slice(s));
        }
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        let n_params = model.param_count();
        for p in 0..n_params {
            let mut plus = model.clone();
            let mut seen = 0usize;
            for layer in &mut plus.layers {
                layer.visit_params_mut(&mut |s| {
                    if p >= seen && p < seen + s.len() {
                        s[p - seen] += h;
                    }
                    seen += s.len();
                });
            }
            let mut minus = model.clone();
            let mut seen = 0usize;
            for layer in &mut minus.layers {
                layer.visit_params_mut(&mut |s| {
                    if p >= seen && p < seen + s.len() {
                        s[p - seen] -= h;
                    }
                    seen += s.len();
                });
            }
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            max_err = max_err.max((fd - analytic[p]).abs());
        }
        assert!(max_err < 1e-6, "max weight-grad error {max_err}");
    }
}
