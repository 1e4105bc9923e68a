//! Dense network kernel: seeded initialization, forward pass, cross-entropy
//! backpropagation and Adam with L2 regularization.
//!
//! Hidden layers use ReLU and the output layer uses softmax. A network may
//! carry a frozen prefix of leading layers that no optimizer step touches;
//! this is how a pretrained backbone is kept fixed under a trainable head.

mod cl3w;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::seed;

pub use cl3w::{decode_cl3w, encode_cl3w, CL3W_MAGIC};
pub(crate) use cl3w::{decode_with_depth, encode_with_depth};
pub use train::{
    adam_step, loss_and_grads, train_local, train_observed, Grads, HyperParams, OptimizerState,
};

/// Multi-layer perceptron. `weights[l]` maps layer `l` inputs (rows) to its
/// outputs (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    frozen_prefix: usize,
}

impl Mlp {
    /// He-style uniform initialization: weights in `±sqrt(6 / fan_in)`,
    /// biases zero, drawn row-major layer by layer from one seeded stream.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = seed::rng(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                (2.0 * seed::unit_f64(&mut rng) - 1.0) * bound
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            frozen_prefix: 0,
        })
    }

    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        frozen_prefix: usize,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::dims("network needs at least one layer"));
        }
        if weights.len() != biases.len() {
            return Err(Error::dims(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_dims = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *layer_dims.last().unwrap() {
                return Err(Error::dims(format!(
                    "layer {l} expects {} inputs, previous layer emits {}",
                    w.nrows(),
                    layer_dims.last().unwrap()
                )));
            }
            if b.len() != w.ncols() {
                return Err(Error::dims(format!(
                    "layer {l} bias has length {}, expected {}",
                    b.len(),
                    w.ncols()
                )));
            }
            layer_dims.push(w.ncols());
        }
        validate_dims(&layer_dims)?;
        let all_finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut mlp = Mlp {
            layer_dims,
            weights,
            biases,
            frozen_prefix: 0,
        };
        mlp.set_frozen_prefix(frozen_prefix)?;
        Ok(mlp)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn frozen_prefix(&self) -> usize {
        self.frozen_prefix
    }

    /// The prefix must leave at least one trainable layer.
    pub fn set_frozen_prefix(&mut self, frozen: usize) -> Result<()> {
        if frozen >= self.num_layers() {
            return Err(Error::dims(format!(
                "frozen prefix {frozen} must be below layer count {}",
                self.num_layers()
            )));
        }
        self.frozen_prefix = frozen;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Class probabilities, one row per input row.
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let hidden = self.activations_through(batch.to_owned(), 0, self.num_layers() - 1);
        let mut logits = self.affine(&hidden, self.num_layers() - 1);
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Applies every layer with ReLU, including the last one. Used when the
    /// network serves as a feature extractor beneath another network.
    pub fn embed(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        Ok(self.activations_through(batch.to_owned(), 0, self.num_layers()))
    }

    /// Argmax class per row. Ties resolve to the lower class index.
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let probs = self.forward(batch)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Splits into layers `[0, at)` and `[at, L)`. The first part keeps as
    /// much of the frozen prefix as it contains (capped below its own
    /// depth); the second part is fully trainable.
    pub fn split_at(&self, at: usize) -> Result<(Mlp, Mlp)> {
        if at == 0 || at >= self.num_layers() {
            return Err(Error::dims(format!(
                "split point {at} must lie strictly inside 1..{}",
                self.num_layers()
            )));
        }
        let front = Mlp {
            layer_dims: self.layer_dims[..=at].to_vec(),
            weights: self.weights[..at].to_vec(),
            biases: self.biases[..at].to_vec(),
            frozen_prefix: self.frozen_prefix.min(at - 1),
        };
        let back = Mlp {
            layer_dims: self.layer_dims[at..].to_vec(),
            weights: self.weights[at..].to_vec(),
            biases: self.biases[at..].to_vec(),
            frozen_prefix: 0,
        };
        Ok((front, back))
    }

    /// Stacks `backbone` under `head`; the result freezes every backbone layer.
    pub fn compose(backbone: &Mlp, head: &Mlp) -> Result<Mlp> {
        if backbone.output_dim() != head.input_dim() {
            return Err(Error::dims(format!(
                "backbone emits {} features, head expects {}",
                backbone.output_dim(),
                head.input_dim()
            )));
        }
        let mut layer_dims = backbone.layer_dims.clone();
        layer_dims.extend_from_slice(&head.layer_dims[1..]);
        let mut weights = backbone.weights.clone();
        weights.extend(head.weights.iter().cloned());
        let mut biases = backbone.biases.clone();
        biases.extend(head.biases.iter().cloned());
        Ok(Mlp {
            layer_dims,
            weights,
            biases,
            frozen_prefix: backbone.num_layers(),
        })
    }

    /// Activations entering layer `self.frozen_prefix`, i.e. the output of
    /// the frozen layers (or the raw batch when nothing is frozen).
    pub(crate) fn frozen_features(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        Ok(self.activations_through(batch.to_owned(), 0, self.frozen_prefix))
    }

    fn check_batch(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::dims(format!(
                "batch has {} features, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if !batch.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input batch"));
        }
        Ok(())
    }

    pub(crate) fn affine(&self, input: &Array2<f64>, layer: usize) -> Array2<f64> {
        let mut z = input.dot(&self.weights[layer]);
        z += &self.biases[layer];
        z
    }

    /// Runs layers `from..to` with ReLU after each.
    pub(crate) fn activations_through(
        &self,
        mut a: Array2<f64>,
        from: usize,
        to: usize,
    ) -> Array2<f64> {
        for l in from..to {
            a = self.affine(&a, l);
            a.mapv_inplace(relu);
        }
        a
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::dims(format!(
            "need at least input and output dims, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::dims(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}
