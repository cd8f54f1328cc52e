//! Minimal dense feed-forward network: forward pass, SGD training with
//! momentum, binary serialization. Used both for the target classifier and
//! for the query detector.

mod io;
mod train;

pub use io::{load_model, save_model, ModelMeta};
pub use train::{train_classifier, train_on_vectors, TrainConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer nonlinearity. The output layer of a classifier is always
/// `Softmax`; hidden layers are `Relu` unless a layer is explicitly built
/// with `Identity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softmax => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Softmax),
            2 => Ok(Activation::Identity),
            t => Err(Error::InvalidConfig(format!("unknown activation tag {t}"))),
        }
    }
}

/// One dense layer mapping `cols` inputs to `rows` outputs.
/// Weights are row-major with shape `(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// All-zero layer of the given shape.
    pub fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            activation,
        }
    }

    /// Affine part only: z = W x + b.
    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }

    fn apply_activation(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self.activation {
            Activation::Relu => out.extend(z.iter().map(|&v| v.max(0.0))),
            Activation::Identity => out.extend_from_slice(z),
            Activation::Softmax => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &v in z {
                    let e = (v - max).exp();
                    sum += e;
                    out.push(e);
                }
                for v in out.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
}

/// A dense feed-forward network. Immutable after training; safe to share
/// across threads for concurrent forward passes.
#[derive(Debug, Clone)]
pub struct DenseNetwork {
    pub(crate) layers: Vec<Layer>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub meta: ModelMeta,
}

impl DenseNetwork {
    /// Build a classifier from layer sizes, e.g. `[784, 128, 64, 10]`.
    /// Hidden layers use ReLU, the output layer softmax. Weights are
    /// initialized uniform in ±sqrt(6/(fan_in+fan_out)), biases zero,
    /// drawn from a ChaCha stream seeded with `seed`.
    pub fn new_classifier(arch: &[usize], seed: u64) -> Result<Self> {
        if arch.len() < 2 {
            return Err(Error::InvalidConfig(
                "architecture needs at least input and output sizes".into(),
            ));
        }
        if arch.contains(&0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = arch.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (cols, rows) = (arch[i], arch[i + 1]);
            let act = if i + 1 == n {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            let mut layer = Layer::zeros(rows, cols, act);
            let a = (6.0 / (cols + rows) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-a..a);
            }
            layers.push(layer);
        }
        Ok(DenseNetwork {
            input_dim: arch[0],
            output_dim: *arch.last().unwrap(),
            layers,
            meta: ModelMeta {
                arch: arch.to_vec(),
                seed,
                train: None,
            },
        })
    }

    /// Assemble a network from explicit layers, validating shape chaining
    /// and the final-softmax invariant.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].rows,
                    actual: pair[1].cols,
                });
            }
        }
        if layers.last().unwrap().activation != Activation::Softmax {
            return Err(Error::InvalidConfig(
                "final layer must be softmax".into(),
            ));
        }
        let arch: Vec<usize> = std::iter::once(layers[0].cols)
            .chain(layers.iter().map(|l| l.rows))
            .collect();
        Ok(DenseNetwork {
            input_dim: layers[0].cols,
            output_dim: layers.last().unwrap().rows,
            layers,
            meta: ModelMeta {
                arch,
                seed: 0,
                train: None,
            },
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass; returns a probability vector of length `output_dim`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut z = Vec::new();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine(&cur, &mut z);
            layer.apply_activation(&z, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Argmax with ties broken to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Sum of the first hidden layer's post-activation outputs.
    /// The deterministic input-sensitive feature behind the parity flip.
    pub fn first_layer_sum(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let layer = &self.layers[0];
        let mut z = Vec::new();
        let mut a = Vec::new();
        layer.affine(x, &mut z);
        layer.apply_activation(&z, &mut a);
        Ok(a.iter().sum())
    }

    /// Forward pass keeping per-layer pre- and post-activation values.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            let mut a = Vec::new();
            layer.apply_activation(&z, &mut a);
            pre.push(z);
            cur = a.clone();
            post.push(a);
        }
        (pre, post)
    }

    /// Margin S(x) = max_{c != c_star} F_c(x) - F_{c_star}(x) and its
    /// input-space gradient, computed by backpropagation. White-box
    /// reference for gradient-estimation experiments.
    #[allow(clippy::needless_range_loop)]
    pub fn margin_input_gradient(&self, x: &[f64], c_star: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if c_star >= self.output_dim {
            return Err(Error::LabelOutOfRange {
                label: c_star,
                classes: self.output_dim,
            });
        }
        let (pre, post) = self.forward_trace(x);
        let probs = post.last().unwrap();
        let mut best = usize::MAX;
        for c in 0..self.output_dim {
            if c != c_star && (best == usize::MAX || probs[c] > probs[best]) {
                best = c;
            }
        }
        let margin = probs[best] - probs[c_star];

        // Seed in post-activation space: dS/dp = e_best - e_cstar.
        let mut grad_post = vec![0.0; self.output_dim];
        grad_post[best] = 1.0;
        grad_post[c_star] = -1.0;

        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &pre[idx];
            let a = &post[idx];
            // Post-activation gradient -> pre-activation gradient.
            let grad_z: Vec<f64> = match layer.activation {
                Activation::Identity => grad_post.clone(),
                Activation::Relu => grad_post
                    .iter()
                    .zip(z)
                    .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
                    .collect(),
                Activation::Softmax => {
                    let dot: f64 = grad_post.iter().zip(a).map(|(g, p)| g * p).sum();
                    grad_post
                        .iter()
                        .zip(a)
                        .map(|(&g, &p)| p * (g - dot))
                        .collect()
                }
            };
            // Pre-activation gradient -> previous layer's post-activation.
            let mut grad_in = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let g = grad_z[r];
                if g == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (gi, w) in grad_in.iter_mut().zip(row) {
                    *gi += g * w;
                }
            }
            grad_post = grad_in;
        }
        Ok((margin, grad_post))
    }

    /// True when every weight and bias is finite.
    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|w| w.is_finite()) && l.bias.iter().all(|b| b.is_finite())
        })
    }
}

/// Argmax over a slice, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the second-largest value, ties to the lowest index.
pub fn second_argmax(values: &[f64]) -> usize {
    debug_assert!(values.len() >= 2);
    let top = argmax(values);
    let mut second = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if i == top {
            continue;
        }
        if second == usize::MAX || v > values[second] {
            second = i;
        }
    }
    second
}

/// Mean cross-entropy of the network over labeled samples.
pub fn cross_entropy_loss(net: &DenseNetwork, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let p = net.forward(x)?;
        total += -(p[y].max(1e-300)).ln();
    }
    Ok(total / inputs.len() as f64)
}
