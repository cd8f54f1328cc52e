//! Mini-batch SGD with momentum on cross-entropy loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, DenseNetwork};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer weight and bias gradients, same shapes as the network.
struct Gradients {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(net: &DenseNetwork) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.bias {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Accumulate d(cross-entropy)/d(params) for one sample into `grads`.
#[allow(clippy::needless_range_loop)]
fn accumulate_sample(net: &DenseNetwork, x: &[f64], label: usize, grads: &mut Gradients) {
    let (pre, post) = net.forward_trace(x);
    let probs = post.last().unwrap();

    // Softmax + cross-entropy: delta at the output pre-activation is p - onehot.
    let mut delta: Vec<f64> = probs.clone();
    delta[label] -= 1.0;

    for idx in (0..net.layers.len()).rev() {
        let layer = &net.layers[idx];
        let input: &[f64] = if idx == 0 { x } else { &post[idx - 1] };
        for r in 0..layer.rows {
            let d = delta[r];
            if d != 0.0 {
                let row = &mut grads.weights[idx][r * layer.cols..(r + 1) * layer.cols];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            grads.bias[idx][r] += d;
        }
        if idx == 0 {
            break;
        }
        // delta for the previous layer: (W^T delta) masked by its activation.
        let mut prev = vec![0.0; layer.cols];
        for r in 0..layer.rows {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        match net.layers[idx - 1].activation {
            Activation::Relu => {
                for (p, z) in prev.iter_mut().zip(&pre[idx - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            Activation::Identity => {}
            Activation::Softmax => unreachable!("softmax only on the output layer"),
        }
        delta = prev;
    }
}

/// Train a fresh classifier with the given architecture on a labeled dataset.
/// Bit-reproducible for a fixed config (init and shuffling both derive from
/// `cfg.seed`).
pub fn train_classifier(data: &Dataset, arch: &[usize], cfg: &TrainConfig) -> Result<DenseNetwork> {
    let mut net = DenseNetwork::new_classifier(arch, cfg.seed)?;
    net.meta.train = Some(*cfg);
    train_on_vectors(&mut net, &data.inputs, &data.labels, cfg)?;
    Ok(net)
}

/// Run SGD epochs on an existing network in place.
pub fn train_on_vectors(
    net: &mut DenseNetwork,
    inputs: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            actual: labels.len(),
        });
    }
    for &y in labels {
        if y >= net.output_dim {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: net.output_dim,
            });
        }
    }
    for x in inputs {
        net.check_input(x)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = Gradients::zeros(net);
    let mut velocity = Gradients::zeros(net);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            for &i in batch {
                accumulate_sample(net, &inputs[i], labels[i], &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for (idx, layer) in net.layers.iter_mut().enumerate() {
                for (j, w) in layer.weights.iter_mut().enumerate() {
                    let v = &mut velocity.weights[idx][j];
                    *v = cfg.momentum * *v - cfg.learning_rate * grads.weights[idx][j] * scale;
                    *w += *v;
                }
                for (j, b) in layer.bias.iter_mut().enumerate() {
                    let v = &mut velocity.bias[idx][j];
                    *v = cfg.momentum * *v - cfg.learning_rate * grads.bias[idx][j] * scale;
                    *b += *v;
                }
            }
        }
    }
    debug_assert!(net.all_finite());
    Ok(())
}

#[cfg(test)]
pub(crate) fn sample_gradients_for_test(
    net: &DenseNetwork,
    x: &[f64],
    label: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut grads = Gradients::zeros(net);
    accumulate_sample(net, x, label, &mut grads);
    (grads.weights, grads.bias)
}
