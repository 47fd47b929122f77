//! Small differentiable prediction models with weighted losses.
//!
//! Parameters live in one flat [`ParamVector`]. Every architecture is a stack
//! of dense layers; the last layer is the task head `W` and everything before
//! it is the feature extractor `phi`.

mod io;
mod net;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::SeededRng;

pub use io::{read_param_file, read_param_text, write_param_file, write_param_text, PARAM_FORMAT_VERSION};
pub(crate) use net::loss_grad_rows as net_kernel;
pub use net::{forward, l2sp_penalty, predict_proba, weighted_grad, weighted_loss, weighted_loss_and_grad, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    LinearRegression,
    SoftmaxLinear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Swish,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
        }
    }

    #[inline]
    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Shape of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    /// Offset of the `inputs x outputs` row-major weight block; biases follow it.
    pub offset: usize,
}

impl LayerShape {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    pub fn end(&self) -> usize {
        self.offset + (self.inputs + 1) * self.outputs
    }
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize) -> Self {
        ModelSpec {
            architecture: Architecture::LinearRegression,
            input_dim,
            output_dim: 1,
            hidden_sizes: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn softmax_linear(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::SoftmaxLinear,
            input_dim,
            output_dim: classes,
            hidden_sizes: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp,
            input_dim,
            output_dim: classes,
            hidden_sizes: hidden.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return invalid!("model dimensions must be positive (input {}, output {})", self.input_dim, self.output_dim);
        }
        match self.architecture {
            Architecture::Mlp => {
                if self.hidden_sizes.is_empty() {
                    return invalid!("mlp needs at least one hidden layer");
                }
                if self.hidden_sizes.contains(&0) {
                    return invalid!("hidden layer sizes must be positive");
                }
            }
            Architecture::LinearRegression | Architecture::SoftmaxLinear => {
                if !self.hidden_sizes.is_empty() {
                    return invalid!("{:?} takes no hidden layers", self.architecture);
                }
            }
        }
        if self.architecture == Architecture::LinearRegression && self.output_dim != 1 {
            return invalid!("linear regression has a single output, got {}", self.output_dim);
        }
        if self.architecture != Architecture::LinearRegression && self.output_dim < 2 {
            return invalid!("classifiers need at least two classes, got {}", self.output_dim);
        }
        Ok(())
    }

    pub fn is_classifier(&self) -> bool {
        self.architecture != Architecture::LinearRegression
    }

    pub(crate) fn layers(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim];
        if self.architecture == Architecture::Mlp {
            dims.extend_from_slice(&self.hidden_sizes);
        }
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = LayerShape { inputs: w[0], outputs: w[1], offset };
                offset = layer.end();
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().last().map_or(0, LayerShape::end)
    }

    /// Range of the task head (last dense layer).
    pub fn head_span(&self) -> Range<usize> {
        let layers = self.layers();
        let last = layers.last().expect("at least one layer");
        last.offset..last.end()
    }

    pub fn phi_span(&self) -> Range<usize> {
        0..self.head_span().start
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.param_count()],
            phi_span: self.phi_span(),
            head_span: self.head_span(),
        }
    }

    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut params = self.zeros();
        for layer in self.layers() {
            self.init_layer(&layer, &mut params.values, rng);
        }
        params
    }

    /// Fresh head with the feature extractor taken from `params`.
    pub fn reinit_head(&self, params: &ParamVector, rng: &mut SeededRng) -> ParamVector {
        let mut out = params.clone();
        let layers = self.layers();
        self.init_layer(layers.last().expect("at least one layer"), &mut out.values, rng);
        out
    }

    fn init_layer(&self, layer: &LayerShape, values: &mut [f64], rng: &mut SeededRng) {
        let bound = 1.0 / (layer.inputs as f64).sqrt();
        for v in &mut values[layer.weights()] {
            *v = rng.random_range(-bound..bound);
        }
        for v in &mut values[layer.biases()] {
            *v = 0.0;
        }
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn spec_hash(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("model spec serializes");
        let digest = Sha256::digest(&canonical);
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.values.len() != self.param_count()
            || params.phi_span != self.phi_span()
            || params.head_span != self.head_span()
        {
            return invalid!(
                "parameter vector of length {} (phi {:?}, head {:?}) does not match model with {} parameters",
                params.values.len(),
                params.phi_span,
                params.head_span,
                self.param_count()
            );
        }
        Ok(())
    }

    /// Builds a parameter vector for this spec from raw values.
    pub fn params_from(&self, values: Vec<f64>) -> Result<ParamVector> {
        let params = ParamVector { values, phi_span: self.phi_span(), head_span: self.head_span() };
        self.check_params(&params)?;
        Ok(params)
    }
}

/// Flat parameters with their split into feature extractor and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub phi_span: Range<usize>,
    pub head_span: Range<usize>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[self.phi_span.clone()]
    }

    pub fn head(&self) -> &[f64] {
        &self.values[self.head_span.clone()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len()
            && self.phi_span == other.phi_span
            && self.head_span == other.head_span
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.same_layout(other)
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Uniform average of parameter vectors with identical layout.
    pub fn average<'a>(items: impl IntoIterator<Item = &'a ParamVector>) -> Result<ParamVector> {
        let mut iter = items.into_iter();
        let Some(first) = iter.next() else {
            return invalid!("cannot average an empty set of parameter vectors");
        };
        let mut acc = first.values.clone();
        let mut count = 1usize;
        for p in iter {
            if !p.same_layout(first) {
                return invalid!("cannot average parameter vectors with different layouts");
            }
            for (a, v) in acc.iter_mut().zip(&p.values) {
                *a += v;
            }
            count += 1;
        }
        let scale = 1.0 / count as f64;
        for a in &mut acc {
            *a *= scale;
        }
        Ok(ParamVector { values: acc, phi_span: first.phi_span.clone(), head_span: first.head_span.clone() })
    }
}

/// Supervision for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
    Value(f64),
}

impl Target {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        match (self, spec.is_classifier()) {
            (Target::Class(c), true) if *c < spec.output_dim => Ok(()),
            (Target::Class(c), true) => invalid!("class index {c} out of range for {} classes", spec.output_dim),
            (Target::Soft(p), true) => {
                if p.len() != spec.output_dim {
                    return invalid!("soft target has {} entries, expected {}", p.len(), spec.output_dim);
                }
                if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return invalid!("soft target is not a probability row");
                }
                Ok(())
            }
            (Target::Value(v), false) if v.is_finite() => Ok(()),
            (Target::Value(v), false) => invalid!("regression target {v} is not finite"),
            (t, _) => invalid!("target {t:?} does not fit a {:?} model", spec.architecture),
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            _ => None,
        }
    }
}
