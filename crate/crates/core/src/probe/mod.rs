// SPDX-License-Identifier: MIT OR Apache-2.0

//! Conflict probes: a linear map or a ReLU MLP from a hidden state to
//! four class logits (`NoConflict`, VP, PT, VT).
//!
//! Weights are stored in `f64` even though activations arrive as `f32`.
//! Dropout is inverted (kept units scaled by `1 / (1 - p)` during training),
//! so the inference pass uses the weights as-is.

mod io;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub use io::{load_probe, save_probe, PROBE_MAGIC};

/// Number of output classes.
pub const NUM_CLASSES: usize = 4;

/// Probe family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    /// Architecture code stored in `.cpb` files.
    pub fn code(self) -> u32 {
        match self {
            ProbeKind::Linear => 0,
            ProbeKind::Mlp => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ProbeKind::Linear),
            1 => Ok(ProbeKind::Mlp),
            other => Err(Error::UnknownArch(other)),
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ProbeKind::Linear),
            "mlp" => Ok(ProbeKind::Mlp),
            other => Err(Error::InvalidInput(format!("unknown probe arch {other:?}"))),
        }
    }
}

/// Layer widths and regularization of a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeArch {
    pub kind: ProbeKind,
    pub input_dim: usize,
    /// Empty for `Linear`.
    pub hidden_dims: Vec<usize>,
    /// Dropout after each hidden ReLU, training only.
    pub dropout_p: f64,
}

impl ProbeArch {
    /// Standard MLP widths.
    pub const MLP_WIDTHS: [usize; 3] = [1024, 512, 256];
    pub const MLP_DROPOUT: f64 = 0.1;

    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ProbeKind::Linear,
            input_dim,
            hidden_dims: Vec::new(),
            dropout_p: 0.0,
        }
    }

    pub fn mlp(input_dim: usize) -> Self {
        Self::mlp_scaled(input_dim, 1.0)
    }

    /// MLP with every hidden width multiplied by `scale` (rounded, at least 1).
    pub fn mlp_scaled(input_dim: usize, scale: f64) -> Self {
        Self {
            kind: ProbeKind::Mlp,
            input_dim,
            hidden_dims: Self::MLP_WIDTHS
                .iter()
                .map(|&w| ((w as f64 * scale).round() as usize).max(1))
                .collect(),
            dropout_p: Self::MLP_DROPOUT,
        }
    }

    pub fn for_kind(kind: ProbeKind, input_dim: usize, mlp_scale: f64) -> Self {
        match kind {
            ProbeKind::Linear => Self::linear(input_dim),
            ProbeKind::Mlp => Self::mlp_scaled(input_dim, mlp_scale),
        }
    }

    /// `(out, in)` of every affine map, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_dims {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((NUM_CLASSES, fan_in));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("probe input_dim must be positive".into()));
        }
        match self.kind {
            ProbeKind::Linear if !self.hidden_dims.is_empty() => {
                return Err(Error::Config("linear probe has no hidden layers".into()))
            }
            ProbeKind::Mlp if self.hidden_dims.is_empty() => {
                return Err(Error::Config("MLP probe needs hidden layers".into()))
            }
            _ => {}
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// One affine map `y = W x + b`, `W` stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, fan_in: usize) -> Self {
        Self {
            weight: Array2::zeros((out, fan_in)),
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// A trained (or freshly initialized) probe.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub arch: ProbeArch,
    pub layers: Vec<Dense>,
    pub trained_on_layer: usize,
    pub class_weights: [f64; NUM_CLASSES],
}

/// Intermediate activations of a training forward pass.
pub(crate) struct ForwardCache {
    /// Input to each affine map (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden map, for the ReLU derivative.
    pre: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers applied after each hidden ReLU.
    masks: Vec<Option<Array2<f64>>>,
}

impl Probe {
    /// Probe with all-zero weights.
    pub fn zeros(arch: ProbeArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense::zeros(o, i))
            .collect();
        Ok(Self {
            arch,
            layers,
            trained_on_layer: 0,
            class_weights: [1.0; NUM_CLASSES],
        })
    }

    /// Check weight shapes against the architecture and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "architecture has {} affine maps, probe has {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, ((out, fan_in), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            if layer.weight.dim() != (*out, *fan_in) || layer.bias.len() != *out {
                return Err(Error::Shape(format!(
                    "layer {i}: expected W {out}x{fan_in}, b {out}; got W {:?}, b {}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {i}: non-finite weight")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "probe expects hidden_dim {}, got {width}",
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Inference-mode logits for one hidden state.
    pub fn logits(&self, h: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        self.check_input(h.len())?;
        let x = ArrayView2::from_shape((1, h.len()), h).expect("contiguous row");
        let z = self.forward_batch(&x);
        Ok(row4(&z, 0))
    }

    /// Training-mode logits: dropout active, masks drawn from `rng`.
    pub fn logits_train<R: Rng + ?Sized>(&self, h: &[f64], rng: &mut R) -> Result<[f64; NUM_CLASSES]> {
        self.check_input(h.len())?;
        let x = ArrayView2::from_shape((1, h.len()), h).expect("contiguous row");
        let (z, _) = self.forward_cached(&x, Some(rng));
        Ok(row4(&z, 0))
    }

    /// Class distribution for one hidden state (softmax of the inference logits).
    pub fn predict(&self, h: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        Ok(softmax4(&self.logits(h)?))
    }

    /// Class distribution for an `f32` hidden state.
    pub fn predict_f32(&self, h: &[f32]) -> Result<[f64; NUM_CLASSES]> {
        let wide: Vec<f64> = h.iter().map(|&v| f64::from(v)).collect();
        self.predict(&wide)
    }

    /// Inference logits for a batch `(n, d)`.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut act = self.layers[0].apply(x);
        if last > 0 {
            act.mapv_inplace(relu);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            act = layer.apply(&act.view());
            if i < last {
                act.mapv_inplace(relu);
            }
        }
        act
    }

    /// Distributions for a batch `(n, d)`.
    pub fn predict_batch(&self, x: &ArrayView2<f64>) -> Result<Vec<[f64; NUM_CLASSES]>> {
        self.check_input(x.ncols())?;
        let z = self.forward_batch(x);
        Ok((0..z.nrows()).map(|r| softmax4(&row4(&z, r))).collect())
    }

    /// Forward pass that keeps what backpropagation needs. `rng = None`
    /// disables dropout.
    pub(crate) fn forward_cached<R: Rng + ?Sized>(
        &self,
        x: &ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> (Array2<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut act = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&act.view());
            cache.inputs.push(act);
            if i == last {
                return (z, cache);
            }
            let mut a = z.mapv(relu);
            let p = self.arch.dropout_p;
            let mask = match rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || if rng.random::<f64>() < p { 0.0 } else { keep });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            act = a;
        }
        unreachable!("probe has at least one layer")
    }

    /// Gradients of a scalar loss given `d loss / d logits` for the cached batch.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_logits: Array2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits;
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            if i == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.layers[i].weight);
            if let Some(mask) = &cache.masks[i - 1] {
                upstream *= mask;
            }
            ndarray::Zip::from(&mut upstream)
                .and(&cache.pre[i - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = upstream;
        }
        grads.reverse();
        grads
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn row4(z: &Array2<f64>, r: usize) -> [f64; NUM_CLASSES] {
    [z[[r, 0]], z[[r, 1]], z[[r, 2]], z[[r, 3]]]
}

/// Numerically stable softmax over four logits.
pub fn softmax4(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let p = util::softmax(logits);
    [p[0], p[1], p[2], p[3]]
}

/// Argmax with ties resolved toward the lowest class index.
pub fn argmax4(dist: &[f64; NUM_CLASSES]) -> usize {
    util::argmax(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_linear_returns_bias() {
        let mut p = Probe::zeros(ProbeArch::linear(3)).unwrap();
        p.layers[0].bias = Array1::from(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.logits(&[0.3, -7.0, 2.0]).unwrap(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_mlp_returns_zero() {
        let p = Probe::zeros(ProbeArch::mlp_scaled(5, 1.0 / 64.0)).unwrap();
        assert_eq!(p.logits(&[1.0; 5]).unwrap(), [0.0; 4]);
    }

    #[test]
    fn identity_linear() {
        let mut p = Probe::zeros(ProbeArch::linear(4)).unwrap();
        p.layers[0].weight = Array2::eye(4);
        assert_eq!(p.logits(&[0.5, 0.0, 0.0, 0.0]).unwrap(), [0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax4(&[0.0; 4]), [0.25; 4]);
        let shifted = softmax4(&[37.5; 4]);
        for v in shifted {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = softmax4(&[2f64.ln(), 0.0, 0.0, 0.0]);
        let expected = [0.4, 0.2, 0.2, 0.2];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{p:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Probe::zeros(ProbeArch::linear(4)).unwrap();
        assert!(matches!(p.logits(&[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_default_widths() {
        let arch = ProbeArch::mlp(16);
        assert_eq!(arch.layer_shapes(), vec![(1024, 16), (512, 1024), (256, 512), (4, 256)]);
        assert_eq!(arch.dropout_p, 0.1);
    }

    #[test]
    fn dropout_is_seed_reproducible_and_inference_is_not_affected() {
        let arch = ProbeArch::mlp_scaled(6, 1.0 / 32.0);
        let mut p = Probe::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for layer in &mut p.layers {
            layer.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            layer.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let h = [0.3, -0.2, 0.9, 1.1, -0.4, 0.05];
        let a = p.logits_train(&h, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = p.logits_train(&h, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.logits(&h).unwrap(), p.logits(&h).unwrap());
    }
}
