use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{softmax_rows, Mlp};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 1e-3,
            l2: 1e-4,
            batch_size: 16,
            epochs: 25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        HyperParams {
            seed,
            ..self.clone()
        }
    }
}

/// Per-layer gradients, shaped like the network. Frozen layers hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Grads {
            weights: mlp
                .weights()
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: mlp
                .biases()
                .iter()
                .map(|b| Array1::zeros(b.len()))
                .collect(),
        }
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.weights.len() == mlp.num_layers()
            && self.biases.len() == mlp.num_layers()
            && self
                .weights
                .iter()
                .zip(mlp.weights())
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(mlp.biases())
                .all(|(g, b)| g.len() == b.len())
    }
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Grads,
    v: Grads,
    t: u64,
}

impl OptimizerState {
    pub fn new(mlp: &Mlp) -> Self {
        OptimizerState {
            m: Grads::zeros_like(mlp),
            v: Grads::zeros_like(mlp),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Mean cross-entropy plus `(l2 / 2) * sum(w^2)` over all weight matrices,
/// with gradients for the trainable layers.
pub fn loss_and_grads(
    mlp: &Mlp,
    batch: ArrayView2<'_, f64>,
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Grads)> {
    check_labels(mlp, batch.nrows(), labels)?;
    let features = mlp.frozen_features(batch)?;
    Ok(backprop_from_frozen(mlp, &features, labels, l2))
}

fn check_labels(mlp: &Mlp, rows: usize, labels: &[usize]) -> Result<()> {
    if rows == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != rows {
        return Err(Error::dims(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    let classes = mlp.output_dim().min(2);
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label });
    }
    Ok(())
}

/// `features` are the activations entering the first trainable layer.
fn backprop_from_frozen(
    mlp: &Mlp,
    features: &Array2<f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, Grads) {
    let start = mlp.frozen_prefix();
    let last = mlp.num_layers() - 1;
    let n = features.nrows() as f64;

    // inputs[k] enters layer start + k
    let mut inputs = Vec::with_capacity(last - start + 1);
    inputs.push(features.clone());
    for l in start..last {
        let next = mlp.activations_through(inputs.last().unwrap().clone(), l, l + 1);
        inputs.push(next);
    }
    let logits = mlp.affine(inputs.last().unwrap(), last);

    let mut data_loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        data_loss += lse - row[y];
    }
    let sq: f64 = mlp
        .weights()
        .iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let loss = data_loss / n + 0.5 * l2 * sq;

    let mut delta = logits;
    softmax_rows(&mut delta);
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grads = Grads::zeros_like(mlp);
    for l in (start..=last).rev() {
        let input = &inputs[l - start];
        let mut gw = input.t().dot(&delta);
        if l2 != 0.0 {
            gw.scaled_add(l2, &mlp.weights()[l]);
        }
        grads.weights[l] = gw;
        grads.biases[l] = delta.sum_axis(Axis(0));
        if l > start {
            let mut upstream = delta.dot(&mlp.weights()[l].t());
            ndarray::Zip::from(&mut upstream)
                .and(input)
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = upstream;
        }
    }
    (loss, grads)
}

/// One bias-corrected Adam update on every trainable layer.
pub fn adam_step(
    mlp: &mut Mlp,
    grads: &Grads,
    state: &mut OptimizerState,
    hyper: &HyperParams,
) -> Result<()> {
    if !grads.matches(mlp) || !state.m.matches(mlp) {
        return Err(Error::dims(
            "gradient or optimizer shapes differ from network",
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.adam_beta1, hyper.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = hyper.learning_rate;
    let eps = hyper.adam_eps;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    let frozen = mlp.frozen_prefix();
    for l in frozen..mlp.num_layers() {
        ndarray::Zip::from(&mut mlp.weights_mut()[l])
            .and(&grads.weights[l])
            .and(&mut state.m.weights[l])
            .and(&mut state.v.weights[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut mlp.biases_mut()[l])
            .and(&grads.biases[l])
            .and(&mut state.m.biases[l])
            .and(&mut state.v.biases[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Mini-batch Adam for exactly `hyper.epochs` epochs over a seeded shuffle.
pub fn train_local(
    mlp: &Mlp,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    hyper: &HyperParams,
) -> Result<Mlp> {
    train_observed(mlp, inputs, labels, hyper, |_, _| true)
}

/// [`train_local`] with a callback after every optimizer step. The callback
/// receives the current model and the number of epochs completed so far
/// (fractional within an epoch) and returns `false` to stop early.
pub fn train_observed(
    mlp: &Mlp,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    hyper: &HyperParams,
    mut observe: impl FnMut(&Mlp, f64) -> bool,
) -> Result<Mlp> {
    hyper.validate()?;
    check_labels(mlp, inputs.nrows(), labels)?;
    if hyper.epochs == 0 {
        return Ok(mlp.clone());
    }
    // Frozen layers never change, so their output is computed once.
    let features = mlp.frozen_features(inputs)?;
    let n = features.nrows();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);

    let mut model = mlp.clone();
    let mut state = OptimizerState::new(&model);
    let mut rng = seed::rng(hyper.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_labels = Vec::with_capacity(hyper.batch_size);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch = features.select(Axis(0), chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grads) = backprop_from_frozen(&model, &batch, &batch_labels, hyper.l2);
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            adam_step(&mut model, &grads, &mut state, hyper)?;
            let progress = epoch as f64 + (step + 1) as f64 / steps_per_epoch as f64;
            if !observe(&model, progress) {
                return Ok(model);
            }
        }
    }
    Ok(model)
}
