//! Layer-wise relevance propagation.
//!
//! Relevance starts at the target logit and is redistributed layer by
//! layer. Linear layers (dense/conv) apply a configurable rule; average
//! pooling redistributes proportionally like a linear layer; max pooling
//! routes winner-takes-all; ReLU passes relevance unchanged.
//!
//! Bias terms absorb relevance: they appear in rule denominators but never
//! receive a share that flows back to the inputs, so conservation is exact
//! only on bias-free networks.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::explain::trace::ActivationTrace;
use crate::nn::conv::{conv_backward_data, conv_forward};
use crate::nn::layer::maxpool_forward;
use crate::nn::{Conv2d, Dense, Feature, Layer};

/// Numerical stabiliser added (sign-aware) to every rule denominator.
pub const STABILIZER: f64 = 1e-7;

/// Redistribution rule for one linear layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    /// Proportional to the signed contributions `x_i * w_ij`.
    Z,
    /// Z with denominator `z_j + eps * sign(z_j)`.
    Epsilon(f64),
    /// Positive and negative contributions weighted alpha/beta, alpha - beta = 1.
    AlphaBeta { alpha: f64, beta: f64 },
    /// Uniform split over the contributing inputs.
    Flat,
    /// Box-constrained input-domain rule for the first layer.
    Box { lo: f64, hi: f64 },
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Rule::Epsilon(eps) if eps <= 0.0 => Err(Error::InvalidParameter(format!(
                "epsilon rule requires eps > 0, got {eps}"
            ))),
            Rule::AlphaBeta { alpha, beta } if (alpha - beta - 1.0).abs() > 1e-12 => {
                Err(Error::InvalidParameter(format!(
                    "alpha_beta rule requires alpha - beta = 1, got {alpha} - {beta}"
                )))
            }
            Rule::Box { lo, hi } if lo >= hi => Err(Error::InvalidParameter(format!(
                "box rule requires lo < hi, got [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        }
    }
}

/// Per-layer-class rule assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpRuleConfig {
    pub dense: Rule,
    pub conv: Rule,
    /// Overrides the rule on the input-nearest linear layer.
    pub first_layer: Option<Rule>,
}

impl LrpRuleConfig {
    pub fn uniform(rule: Rule) -> LrpRuleConfig {
        LrpRuleConfig { dense: rule, conv: rule, first_layer: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.dense.validate()?;
        self.conv.validate()?;
        if let Some(rule) = &self.first_layer {
            rule.validate()?;
        }
        Ok(())
    }
}

/// Named preset compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    AFlat,
    BFlat,
}

/// Rule compositions behind the two named presets: epsilon(0.1) on dense
/// layers, alpha/beta on convolutions (1/0 for A, 2/1 for B), and a flat
/// input-nearest layer.
pub fn preset_rules(kind: PresetKind) -> LrpRuleConfig {
    let conv = match kind {
        PresetKind::AFlat => Rule::AlphaBeta { alpha: 1.0, beta: 0.0 },
        PresetKind::BFlat => Rule::AlphaBeta { alpha: 2.0, beta: 1.0 },
    };
    LrpRuleConfig {
        dense: Rule::Epsilon(0.1),
        conv,
        first_layer: Some(Rule::Flat),
    }
}

fn stab(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Relevance at the model input, shaped `(C, H, W)`.
pub fn lrp_backward(
    trace: &ActivationTrace,
    target_class: usize,
    config: &LrpRuleConfig,
) -> Result<Array3<f64>> {
    config.validate()?;
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
        let rule_for = |default: Rule| -> Rule {
            match (&config.first_layer, first_linear) {
                (Some(first_rule), Some(fi)) if fi == index => *first_rule,
                _ => default,
            }
        };
        relevance = match layer {
            Layer::Dense(dense) => {
                let r = relevance.as_vector()?;
                let x = input.as_vector()?;
                Feature::Vector(dense_rule(dense, x, r, rule_for(config.dense))?)
            }
            Layer::Conv2d(conv) => {
                let r = relevance.as_map()?;
                let x = input.as_map()?;
                Feature::Map(conv_rule(conv, x, r, rule_for(config.conv))?)
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
                    let denom = stab(z, STABILIZER);
                    let scale = r[ci] / (n * denom);
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

fn split_pos_neg_1(a: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    (a.mapv(|v| v.max(0.0)), a.mapv(|v| v.min(0.0)))
}

fn dense_rule(dense: &Dense, x: &Array1<f64>, r: &Array1<f64>, rule: Rule) -> Result<Array1<f64>> {
    let w = &dense.weight;
    match rule {
        Rule::Z | Rule::Epsilon(_) => {
            let eps = if let Rule::Epsilon(e) = rule { e } else { STABILIZER };
            let mut z = w.dot(x);
            if let Some(b) = &dense.bias {
                z += b;
            }
            let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z, eps));
            Ok(x * &w.t().dot(&s))
        }
        Rule::AlphaBeta { alpha, beta } => {
            let (xp, xn) = split_pos_neg_1(x);
            let wp = w.mapv(|v| v.max(0.0));
            let wn = w.mapv(|v| v.min(0.0));
            let mut p = wp.dot(&xp) + wn.dot(&xn);
            let mut n = wn.dot(&xp) + wp.dot(&xn);
            if let Some(b) = &dense.bias {
                p += &b.mapv(|v| v.max(0.0));
                n += &b.mapv(|v| v.min(0.0));
            }
            let s = ndarray::Zip::from(r)
                .and(&p)
                .map_collect(|&r, &p| alpha * r / (p + STABILIZER));
            let t = ndarray::Zip::from(r)
                .and(&n)
                .map_collect(|&r, &n| beta * r / (n - STABILIZER));
            let positive = &xp * &wp.t().dot(&s) + &xn * &wn.t().dot(&s);
            let negative = &xp * &wn.t().dot(&t) + &xn * &wp.t().dot(&t);
            Ok(positive - negative)
        }
        Rule::Flat => {
            let ones_w = Array2::<f64>::ones(w.dim());
            let count = w.dim().1 as f64;
            let s = r.mapv(|r| r / stab(count, STABILIZER));
            Ok(ones_w.t().dot(&s))
        }
        Rule::Box { lo, hi } => {
            let wp = w.mapv(|v| v.max(0.0));
            let wn = w.mapv(|v| v.min(0.0));
            let lo_x = Array1::<f64>::from_elem(x.len(), lo);
            let hi_x = Array1::<f64>::from_elem(x.len(), hi);
            let z = w.dot(x) - wp.dot(&lo_x) - wn.dot(&hi_x);
            let s = ndarray::Zip::from(r)
                .and(&z)
                .map_collect(|&r, &z| r / stab(z, STABILIZER));
            Ok(x * &w.t().dot(&s) - &lo_x * &wp.t().dot(&s) - &hi_x * &wn.t().dot(&s))
        }
    }
}

fn conv_rule(conv: &Conv2d, x: &Array3<f64>, r: &Array3<f64>, rule: Rule) -> Result<Array3<f64>> {
    let w = &conv.weight;
    let (stride, padding) = (conv.stride, conv.padding);
    let bwd = |s: &Array3<f64>, w: &Array4<f64>| conv_backward_data(s, w, x.dim(), stride, padding);
    match rule {
        Rule::Z | Rule::Epsilon(_) => {
            let eps = if let Rule::Epsilon(e) = rule { e } else { STABILIZER };
            let z = conv_forward(x, w, conv.bias.as_ref(), stride, padding);
            let s = ndarray::Zip::from(r).and(&z).map_collect(|&r, &z| r / stab(z, eps));
            Ok(x * &bwd(&s, w))
        }
        Rule::AlphaBeta { alpha, beta } => {
            let xp = x.mapv(|v| v.max(0.0));
            let xn = x.mapv(|v| v.min(0.0));
            let wp = w.mapv(|v| v.max(0.0));
            let wn = w.mapv(|v| v.min(0.0));
            let bp = conv.bias.as_ref().map(|b| b.mapv(|v| v.max(0.0)));
            let bn = conv.bias.as_ref().map(|b| b.mapv(|v| v.min(0.0)));
            let p = conv_forward(&xp, &wp, bp.as_ref(), stride, padding)
                + conv_forward(&xn, &wn, None, stride, padding);
            let n = conv_forward(&xp, &wn, bn.as_ref(), stride, padding)
                + conv_forward(&xn, &wp, None, stride, padding);
            let s = ndarray::Zip::from(r)
                .and(&p)
                .map_collect(|&r, &p| alpha * r / (p + STABILIZER));
            let t = ndarray::Zip::from(r)
                .and(&n)
                .map_collect(|&r, &n| beta * r / (n - STABILIZER));
            let positive = &xp * &bwd(&s, &wp) + &xn * &bwd(&s, &wn);
            let negative = &xp * &bwd(&t, &wn) + &xn * &bwd(&t, &wp);
            Ok(positive - negative)
        }
        Rule::Flat => {
            let ones_w = Array4::<f64>::ones(w.dim());
            let ones_x = Array3::<f64>::ones(x.dim());
            let z = conv_forward(&ones_x, &ones_w, None, stride, padding);
            let s = ndarray::Zip::from(r)
                .and(&z)
                .map_collect(|&r, &z| r / stab(z, STABILIZER));
            Ok(bwd(&s, &ones_w))
        }
        Rule::Box { lo, hi } => {
            let wp = w.mapv(|v| v.max(0.0));
            let wn = w.mapv(|v| v.min(0.0));
            let lo_x = Array3::<f64>::from_elem(x.dim(), lo);
            let hi_x = Array3::<f64>::from_elem(x.dim(), hi);
            let z = conv_forward(x, w, None, stride, padding)
                - conv_forward(&lo_x, &wp, None, stride, padding)
                - conv_forward(&hi_x, &wn, None, stride, padding);
            let s = ndarray::Zip::from(r)
                .and(&z)
                .map_collect(|&r, &z| r / stab(z, STABILIZER));
            Ok(x * &bwd(&s, w) - &lo_x * &bwd(&s, &wp) - &hi_x * &bwd(&s, &wn))
        }
    }
}
