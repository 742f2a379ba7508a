//! Feedforward network surrogate: sigmoid activation at every layer
//! including the output, trained by mini-batch gradient descent on the mean
//! squared error with reverse-mode gradients.
//!
//! Inputs are z-score normalized. Because the output layer is a sigmoid,
//! targets are mapped onto `[0, 1]` by a min-max transform over the training
//! split and the prediction is mapped back; the denormalization inverts the
//! training normalization exactly.

use super::{SampleSet, SurrogateError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of the samples held out for validation.
    pub validation_split: f64,
    /// Epochs without validation improvement before training stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for NnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 0.5,
            batch_size: 32,
            validation_split: 0.2,
            patience: 50,
            seed: 0,
        }
    }
}

/// Default hidden architecture: one hidden layer of ten neurons.
pub const DEFAULT_HIDDEN: &[usize] = &[10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnModel {
    /// Layer weight matrices, row-major `fan_out x fan_in`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Output range mapped onto `[0, 1]` during training.
    pub output_lo: Vec<f64>,
    pub output_hi: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NnModel {
    pub(crate) fn validate(&self) -> Result<(), SurrogateError> {
        if self.weights.len() != self.biases.len() || self.weights.is_empty() {
            return Err(SurrogateError::InvalidModel(
                "layer weights and biases must pair up".into(),
            ));
        }
        let mut fan_in = self.input_dim;
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.len() != b.len() || w.iter().any(|row| row.len() != fan_in) {
                return Err(SurrogateError::InvalidModel(format!(
                    "layer {layer}: expected fan-in {fan_in}"
                )));
            }
            fan_in = w.len();
        }
        if fan_in != self.output_dim {
            return Err(SurrogateError::InvalidModel(format!(
                "network ends in {fan_in} units, expected {}",
                self.output_dim
            )));
        }
        if self.input_mean.len() != self.input_dim
            || self.input_std.len() != self.input_dim
            || self.output_lo.len() != self.output_dim
            || self.output_hi.len() != self.output_dim
        {
            return Err(SurrogateError::InvalidModel(
                "normalization parameter dimensions do not match".into(),
            ));
        }
        Ok(())
    }

    fn normalize_input(&self, chi: &[f64]) -> Vec<f64> {
        chi.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    fn normalize_output(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.output_lo.iter().zip(&self.output_hi))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    fn denormalize_output(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.output_lo.iter().zip(&self.output_hi))
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    /// Forward pass in normalized space; returns the activations of every
    /// layer (the first entry is the normalized input).
    fn forward(&self, normalized: &[f64]) -> Vec<Vec<f64>> {
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(normalized.to_vec());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let prev = activations.last().unwrap();
            let next: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    sigmoid(row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>() + bias)
                })
                .collect();
            activations.push(next);
        }
        activations
    }

    /// Sigmoid output before denormalization, in `(0, 1)`.
    pub fn forward_normalized(&self, chi: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        if chi.len() != self.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.input_dim,
                got: chi.len(),
            });
        }
        Ok(self.forward(&self.normalize_input(chi)).pop().unwrap())
    }

    /// Mean squared error over normalized inputs and targets, averaged over
    /// samples and output dimensions.
    pub fn training_loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
        let mut loss = 0.0;
        for (chi, z) in inputs.iter().zip(targets) {
            let prediction = self.forward(&self.normalize_input(chi)).pop().unwrap();
            let target = self.normalize_output(z);
            loss += prediction
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        }
        loss / (inputs.len() as f64 * self.output_dim as f64)
    }

    /// Loss and its gradient with respect to every weight and bias, computed
    /// by reverse-mode differentiation over the full batch.
    #[allow(clippy::type_complexity)]
    pub fn training_gradient(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> (f64, Vec<(Vec<Vec<f64>>, Vec<f64>)>) {
        let layers = self.weights.len();
        let mut grads: Vec<(Vec<Vec<f64>>, Vec<f64>)> = self
            .weights
            .iter()
            .map(|w| (vec![vec![0.0; w[0].len()]; w.len()], vec![0.0; w.len()]))
            .collect();
        let scale = 1.0 / (inputs.len() as f64 * self.output_dim as f64);
        let mut loss = 0.0;
        for (chi, z) in inputs.iter().zip(targets) {
            let activations = self.forward(&self.normalize_input(chi));
            let target = self.normalize_output(z);
            let output = activations.last().unwrap();
            loss += output
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
            // Output-layer sensitivity of the summed squared error.
            let mut delta: Vec<f64> = output
                .iter()
                .zip(&target)
                .map(|(p, t)| 2.0 * (p - t) * p * (1.0 - p))
                .collect();
            for layer in (0..layers).rev() {
                let prev = &activations[layer];
                let (gw, gb) = &mut grads[layer];
                for (unit, &d) in delta.iter().enumerate() {
                    gb[unit] += scale * d;
                    for (slot, &a) in gw[unit].iter_mut().zip(prev) {
                        *slot += scale * d * a;
                    }
                }
                if layer > 0 {
                    let w = &self.weights[layer];
                    delta = (0..prev.len())
                        .map(|j| {
                            let upstream: f64 =
                                delta.iter().enumerate().map(|(u, d)| d * w[u][j]).sum();
                            upstream * prev[j] * (1.0 - prev[j])
                        })
                        .collect();
                }
            }
        }
        (loss * scale, grads)
    }
}

/// Trains a sigmoid network on the sample set. The returned model carries the
/// parameters that achieved the best validation loss; training is
/// reproducible from the seed.
pub fn fit_nn(
    set: &SampleSet,
    hidden: &[usize],
    config: &NnTrainConfig,
) -> Result<NnModel, SurrogateError> {
    let m = set.len();
    if m < 2 {
        return Err(SurrogateError::NotEnoughSamples { have: m, need: 2 });
    }
    if hidden.iter().any(|&h| h == 0) {
        return Err(SurrogateError::InvalidModel(
            "hidden layers must have at least one unit".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.validation_split) {
        return Err(SurrogateError::InvalidModel(format!(
            "validation split {} must lie in [0, 1)",
            config.validation_split
        )));
    }

    let inputs: Vec<Vec<f64>> = set.samples.iter().map(|s| s.input.flatten()).collect();
    let targets: Vec<Vec<f64>> = set.samples.iter().map(|s| s.output.clone()).collect();
    let d = set.input_dim;
    let out = set.output_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let val_count = ((m as f64 * config.validation_split).round() as usize).min(m - 1);
    let (val_idx, train_idx) = order.split_at(val_count);
    let train_idx = train_idx.to_vec();
    let val_idx = if val_idx.is_empty() {
        train_idx.clone()
    } else {
        val_idx.to_vec()
    };

    // Normalization statistics from the training split only.
    let mut input_mean = vec![0.0; d];
    let mut input_std = vec![0.0; d];
    for &i in &train_idx {
        for (k, &v) in inputs[i].iter().enumerate() {
            input_mean[k] += v;
        }
    }
    for v in &mut input_mean {
        *v /= train_idx.len() as f64;
    }
    for &i in &train_idx {
        for (k, &v) in inputs[i].iter().enumerate() {
            input_std[k] += (v - input_mean[k]) * (v - input_mean[k]);
        }
    }
    for v in &mut input_std {
        *v = (*v / train_idx.len() as f64).sqrt();
        if *v == 0.0 {
            *v = 1.0;
        }
    }
    let mut output_lo = vec![f64::INFINITY; out];
    let mut output_hi = vec![f64::NEG_INFINITY; out];
    for &i in &train_idx {
        for (k, &v) in targets[i].iter().enumerate() {
            output_lo[k] = output_lo[k].min(v);
            output_hi[k] = output_hi[k].max(v);
        }
    }
    for k in 0..out {
        if output_hi[k] <= output_lo[k] {
            // Constant targets: center them at the sigmoid midpoint so the
            // bias-only solution reproduces them exactly.
            output_lo[k] -= 0.5;
            output_hi[k] += 0.5;
        }
    }

    // Symmetric uniform initialization scaled by the layer fan.
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d);
    dims.extend_from_slice(hidden);
    dims.push(out);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(
            (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.gen_range(-r..r)).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        biases.push(vec![0.0; fan_out]);
    }

    let mut model = NnModel {
        weights,
        biases,
        input_mean,
        input_std,
        output_lo,
        output_hi,
        input_dim: d,
        output_dim: out,
    };

    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| inputs[i].clone()).collect(),
            idx.iter().map(|&i| targets[i].clone()).collect(),
        )
    };
    let (val_inputs, val_targets) = gather(&val_idx);

    let mut best = model.clone();
    let mut best_val = model.training_loss(&val_inputs, &val_targets);
    let mut stale_epochs = 0;
    let mut shuffled = train_idx.clone();
    let batch = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(batch) {
            let (batch_in, batch_out) = gather(chunk);
            let (loss, grads) = model.training_gradient(&batch_in, &batch_out);
            if !loss.is_finite() {
                return Err(SurrogateError::TrainingDiverged { epoch });
            }
            for (layer, (gw, gb)) in grads.into_iter().enumerate() {
                for (row, grow) in model.weights[layer].iter_mut().zip(gw) {
                    for (w, g) in row.iter_mut().zip(grow) {
                        *w -= config.learning_rate * g;
                    }
                }
                for (b, g) in model.biases[layer].iter_mut().zip(gb) {
                    *b -= config.learning_rate * g;
                }
            }
        }
        let val_loss = model.training_loss(&val_inputs, &val_targets);
        if !val_loss.is_finite() {
            return Err(SurrogateError::TrainingDiverged { epoch });
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// Evaluates the network at a flattened input: normalization, sigmoid layers,
/// denormalization.
pub fn eval_nn_flat(model: &NnModel, chi: &[f64]) -> Result<Vec<f64>, SurrogateError> {
    let output = model.forward_normalized(chi)?;
    Ok(model.denormalize_output(&output))
}
