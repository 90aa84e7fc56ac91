//! Feed-forward place classifiers, their training loops, and the black-box
//! query wrapper that is the only channel to a teacher.

mod blackbox;
mod checkpoint;
mod train;

pub use blackbox::{query_blackbox, BlackBoxHandle, Predictor};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{distill, fit, train_supervised, Fit, TrainConfig};
pub(crate) use train::one_hot_pairs;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::rng_for;
use crate::types::{FeatureVector, PredictionDistribution};

/// Layer sizes. `hidden_dim == 0` means a linear-softmax model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
        }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self::new(input_dim, 0, output_dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.hidden_dim == 0 {
            vec![(self.input_dim, self.output_dim)]
        } else {
            vec![(self.input_dim, self.hidden_dim), (self.hidden_dim, self.output_dim)]
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs positive input and output sizes, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense layer computing `x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.weights.row(i)) {
                *o += xi * w;
            }
        }
    }
}

/// A trained (or freshly initialized) classifier: ReLU hidden layer, softmax
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    layers: Vec<Layer>,
    seed: u64,
}

impl Classifier {
    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, &[0x1a7e5]);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-a..a)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { arch, layers, seed })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weights: Matrix::zeros(i, o),
                bias: vec![0.0; o],
            })
            .collect();
        Ok(Self {
            arch,
            layers,
            seed: 0,
        })
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim(dims.len(), layers.len(), "layer count"));
        }
        for ((i, o), layer) in dims.iter().zip(&layers) {
            if layer.weights.rows() != *i || layer.weights.cols() != *o || layer.bias.len() != *o {
                return Err(Error::InvalidArgument(format!(
                    "layer shape {}x{} (+{}) does not match {i}x{o}",
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.bias.len()
                )));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric("non-finite weights".into()));
            }
        }
        Ok(Self {
            arch,
            layers,
            seed: 0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output-layer pre-activations.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::dim(self.arch.input_dim, x.len(), "classifier input"));
        }
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.bias.len()];
            layer.forward_into(&current, &mut out);
            if k + 1 < self.layers.len() {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            current = out;
        }
        Ok(current)
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<PredictionDistribution> {
        let logits = self.logits(x.as_slice())?;
        PredictionDistribution::new(softmax(&logits, 1.0))
    }

    /// All parameters flattened: per layer, weights row-major then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.num_parameters());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.arch.num_parameters() {
            return Err(Error::dim(self.arch.num_parameters(), params.len(), "parameter vector"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`, shifted by the maximum for stability.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn predict(model: &Classifier, x: &FeatureVector) -> Result<PredictionDistribution> {
    model.predict(x)
}
