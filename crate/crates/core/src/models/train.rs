//! Mini-batch gradient descent on soft-target cross-entropy.
//!
//! Supervised training lifts hard labels to one-hot targets, so supervised
//! learning and distillation share one loss:
//! `L = -Σ_k t_k log softmax(z / T)_k`, averaged over the batch.

use rand::seq::SliceRandom;

use super::{Architecture, Classifier};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::types::{Dataset, PseudoSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 100,
            batch_size: 32,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A trained model and its mean training loss per epoch.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: Classifier,
    pub epoch_losses: Vec<f64>,
}

/// Per-sample scratch space for backpropagation.
struct Workspace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(arch: &Architecture) -> Self {
        Self {
            hidden_pre: vec![0.0; arch.hidden_dim],
            hidden: vec![0.0; arch.hidden_dim],
            logits: vec![0.0; arch.output_dim],
            dlogits: vec![0.0; arch.output_dim],
            dhidden: vec![0.0; arch.hidden_dim],
        }
    }
}

impl Classifier {
    /// Accumulate the gradient of one sample's loss into `grad` (flattened in
    /// [`Classifier::parameters`] order, scaled by `weight`) and return the
    /// sample loss.
    fn backprop_sample(
        &self,
        x: &[f64],
        target: &[f64],
        temperature: f64,
        weight: f64,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        let arch = self.arch;
        let (out_layer, input_to_out): (&super::Layer, &[f64]) = if arch.hidden_dim == 0 {
            (&self.layers[0], x)
        } else {
            let l1 = &self.layers[0];
            l1.forward_into(x, &mut ws.hidden_pre);
            for (h, p) in ws.hidden.iter_mut().zip(&ws.hidden_pre) {
                *h = p.max(0.0);
            }
            (&self.layers[1], &ws.hidden)
        };
        out_layer.forward_into(input_to_out, &mut ws.logits);

        let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, z) in ws.dlogits.iter_mut().zip(&ws.logits) {
            *d = ((z - max) / temperature).exp();
            sum += *d;
        }
        let log_sum = sum.ln();
        let mut loss = 0.0;
        for ((d, z), t) in ws.dlogits.iter_mut().zip(&ws.logits).zip(target) {
            let log_p = (z - max) / temperature - log_sum;
            if *t > 0.0 {
                loss -= t * log_p;
            }
            // dL/dz = (p - t) / T
            *d = weight * (*d / sum - t) / temperature;
        }

        let c = arch.output_dim;
        let (grad_first, grad_out) = if arch.hidden_dim == 0 {
            (None, &mut grad[..])
        } else {
            let split = arch.input_dim * arch.hidden_dim + arch.hidden_dim;
            let (a, b) = grad.split_at_mut(split);
            (Some(a), b)
        };
        let rows = input_to_out.len();
        for (j, &a) in input_to_out.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let g = &mut grad_out[j * c..(j + 1) * c];
            for (gk, dk) in g.iter_mut().zip(&ws.dlogits) {
                *gk += a * dk;
            }
        }
        for (gk, dk) in grad_out[rows * c..rows * c + c].iter_mut().zip(&ws.dlogits) {
            *gk += dk;
        }

        if let Some(grad_first) = grad_first {
            let h = arch.hidden_dim;
            for j in 0..h {
                ws.dhidden[j] = if ws.hidden_pre[j] > 0.0 {
                    out_layer
                        .weights
                        .row(j)
                        .iter()
                        .zip(&ws.dlogits)
                        .map(|(w, d)| w * d)
                        .sum()
                } else {
                    0.0
                };
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let g = &mut grad_first[i * h..(i + 1) * h];
                for (gj, dj) in g.iter_mut().zip(&ws.dhidden) {
                    *gj += xi * dj;
                }
            }
            let bias_offset = arch.input_dim * h;
            for (gj, dj) in grad_first[bias_offset..bias_offset + h].iter_mut().zip(&ws.dhidden) {
                *gj += dj;
            }
        }
        loss
    }

    /// Mean loss over the given samples and its gradient with respect to
    /// [`Classifier::parameters`].
    pub fn loss_and_gradient(
        &self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
        temperature: f64,
    ) -> Result<(f64, Vec<f64>)> {
        check_pairs(&self.arch, inputs, targets)?;
        if inputs.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let mut grad = vec![0.0; self.arch.num_parameters()];
        let mut ws = Workspace::new(&self.arch);
        let weight = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            loss += self.backprop_sample(x, t, temperature, weight, &mut ws, &mut grad);
        }
        Ok((loss * weight, grad))
    }

    fn apply_update(&mut self, grad: &[f64], lr: f64) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.as_mut_slice();
            for (p, g) in w.iter_mut().zip(&grad[offset..]) {
                *p -= lr * g;
            }
            offset += w.len();
            for (p, g) in layer.bias.iter_mut().zip(&grad[offset..]) {
                *p -= lr * g;
            }
            offset += layer.bias.len();
        }
    }
}

fn check_pairs(arch: &Architecture, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::dim(inputs.len(), targets.len(), "inputs vs targets"));
    }
    for (x, t) in inputs.iter().zip(targets) {
        if x.len() != arch.input_dim {
            return Err(Error::dim(arch.input_dim, x.len(), "training input"));
        }
        if t.len() != arch.output_dim {
            return Err(Error::dim(arch.output_dim, t.len(), "training target"));
        }
    }
    Ok(())
}

/// Train on soft targets, starting from `init` when given (warm start) or
/// from a fresh initialization seeded by `config.seed`.
pub fn fit(
    inputs: &[&[f64]],
    targets: &[&[f64]],
    arch: Architecture,
    config: &TrainConfig,
    init: Option<&Classifier>,
) -> Result<Fit> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    check_pairs(&arch, inputs, targets)?;
    let mut model = match init {
        Some(m) if m.architecture() == arch => m.clone(),
        Some(m) => {
            return Err(Error::InvalidArgument(format!(
                "warm-start architecture {:?} differs from {arch:?}",
                m.architecture()
            )))
        }
        None => Classifier::init(arch, config.seed)?,
    };

    let mut rng = rng_for(config.seed, &[0x5_4ff1e]);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grad = vec![0.0; arch.num_parameters()];
    let mut ws = Workspace::new(&arch);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += model.backprop_sample(
                    inputs[i],
                    targets[i],
                    config.temperature,
                    weight,
                    &mut ws,
                    &mut grad,
                );
            }
            model.apply_update(&grad, config.learning_rate);
        }
        epoch_losses.push(epoch_loss / inputs.len() as f64);
    }
    if model.parameters().iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("training diverged to non-finite weights".into()));
    }
    Ok(Fit {
        model,
        epoch_losses,
    })
}

/// Supervised learning on hard labels.
pub fn train_supervised(data: &Dataset, arch: Architecture, config: &TrainConfig) -> Result<Classifier> {
    let (inputs, targets) = one_hot_pairs(data, arch.output_dim)?;
    let xs: Vec<&[f64]> = inputs.to_vec();
    let ts: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    Ok(fit(&xs, &ts, arch, config, None)?.model)
}

pub(crate) fn one_hot_pairs(data: &Dataset, output_dim: usize) -> Result<(Vec<&[f64]>, Vec<Vec<f64>>)> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut inputs = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for s in data.samples() {
        if s.y.0 >= output_dim {
            return Err(Error::InvalidArgument(format!(
                "label {} exceeds output dimension {output_dim}",
                s.y
            )));
        }
        let mut t = vec![0.0; output_dim];
        t[s.y.0] = 1.0;
        inputs.push(s.x.as_slice());
        targets.push(t);
    }
    Ok((inputs, targets))
}

/// Distillation on the union of pseudo-sets.
pub fn distill(pseudo_sets: &[&[PseudoSample]], arch: Architecture, config: &TrainConfig) -> Result<Classifier> {
    let (xs, ts): (Vec<&[f64]>, Vec<&[f64]>) = pseudo_sets
        .iter()
        .flat_map(|set| set.iter())
        .map(|s| (s.x.as_slice(), s.soft.as_slice()))
        .unzip();
    if xs.is_empty() {
        return Err(Error::Empty("pseudo-sample union"));
    }
    Ok(fit(&xs, &ts, arch, config, None)?.model)
}
