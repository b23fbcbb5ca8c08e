use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Self {
        assert_eq!(weights.nrows(), bias.len(), "bias length must match output width");
        Self {
            weights,
            bias,
            activation,
        }
    }

    fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        let std = (gain / fan_in as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self::new(weights, Array1::zeros(fan_out), activation)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        activate(z, self.activation)
    }
}

fn activate(mut z: Array2<f64>, activation: Activation) -> Array2<f64> {
    match activation {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Identity => {}
        Activation::Softmax => softmax_rows(&mut z),
    }
    z
}

pub(crate) fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Per-feature affine normalisation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    /// Mean and population standard deviation per column; constant columns
    /// keep unit scale.
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty input");
        let std = x.std_axis(Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self { shift: mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.shift) / &self.scale
    }
}

/// A feed-forward network: input normalisation followed by dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input: Standardizer,
    pub layers: Vec<Dense>,
    /// Set once training finished; the frozen reference parameters.
    pub theta_star: bool,
}

/// Gradient of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl MlpParams {
    pub fn new(input: Standardizer, layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty(), "at least one layer");
        assert_eq!(input.dim(), layers[0].input_dim(), "normaliser width");
        for pair in layers.windows(2) {
            assert_eq!(pair[0].output_dim(), pair[1].input_dim(), "layer chain");
        }
        Self {
            input,
            layers,
            theta_star: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Total parameter count `u`.
    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub(crate) fn check_dim(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = self.input.apply(x);
        for layer in &self.layers {
            a = layer.apply(&a);
        }
        a
    }

    /// Activations `[a0, a1, .., aL]`, with `a0` the normalised input.
    pub(crate) fn forward_trace(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(self.input.apply(x));
        for layer in &self.layers {
            let next = layer.apply(trace.last().unwrap());
            trace.push(next);
        }
        trace
    }

    /// Backpropagates `d_last`, the loss gradient w.r.t. the final layer's
    /// pre-activations (one row per sample). Returns per-layer parameter
    /// gradients summed over rows, and the per-layer pre-activation gradients.
    pub(crate) fn backward(
        &self,
        trace: &[Array2<f64>],
        d_last: Array2<f64>,
    ) -> (Vec<LayerGrad>, Vec<Array2<f64>>) {
        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        let mut deltas = Vec::with_capacity(n_layers);
        let mut delta = d_last;
        for l in (0..n_layers).rev() {
            grads.push(LayerGrad {
                weights: delta.t().dot(&trace[l]),
                bias: delta.sum_axis(Axis(0)),
            });
            let next = if l > 0 {
                let mut prev = delta.dot(&self.layers[l].weights);
                match self.layers[l - 1].activation {
                    Activation::Relu => {
                        ndarray::Zip::from(&mut prev)
                            .and(&trace[l])
                            .for_each(|d, &a| {
                                if a <= 0.0 {
                                    *d = 0.0
                                }
                            });
                    }
                    Activation::Identity => {}
                    Activation::Softmax => unreachable!("softmax is output-only"),
                }
                Some(prev)
            } else {
                None
            };
            deltas.push(delta);
            if let Some(prev) = next {
                delta = prev;
            } else {
                break;
            }
        }
        grads.reverse();
        deltas.reverse();
        (grads, deltas)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

fn grad_slices(grads: &[LayerGrad]) -> Vec<&[f64]> {
    grads
        .iter()
        .flat_map(|g| {
            [
                g.weights.as_slice().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

/// Optimiser settings shared by every trainable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch: usize,
    /// Lower bound on optimiser steps when `epochs > 0`, so that small
    /// retraining sets still receive a useful number of updates.
    pub min_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            minibatch: 64,
            min_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Adam over a list of flat parameter tensors.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub(crate) fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Descends along `grads`.
    pub(crate) fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Runs shuffled minibatch epochs, calling `step(indices, step_no)` per
/// minibatch.
pub(crate) fn for_each_minibatch(
    n: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&[usize], usize) -> Result<()>,
) -> Result<()> {
    if cfg.epochs == 0 || n == 0 {
        return Ok(());
    }
    let mb = cfg.minibatch.max(1);
    let per_epoch = n.div_ceil(mb);
    let total = (cfg.epochs * per_epoch).max(cfg.min_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut done = 0;
    while done < total {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            step(chunk, done)?;
            done += 1;
            if done == total {
                break;
            }
        }
    }
    Ok(())
}

pub(crate) fn select_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Mean cross-entropy and its gradient (mean over rows).
pub fn cross_entropy_grad(
    model: &MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
) -> (f64, Vec<LayerGrad>) {
    let trace = model.forward_trace(x);
    let n = x.nrows() as f64;
    let probs = trace.last().unwrap();
    let mut loss = 0.0;
    let mut d = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs[[r, y]].max(1e-300).ln();
        d[[r, y]] -= 1.0;
    }
    d /= n;
    let (grads, _) = model.backward(&trace, d);
    (loss / n, grads)
}

/// Mean squared error against `target` (mean over rows and columns) and its
/// gradient. The target lives in the model's normalised input space.
pub fn mse_grad(
    model: &MlpParams,
    x: &Array2<f64>,
    target: &Array2<f64>,
) -> (f64, Vec<LayerGrad>) {
    let trace = model.forward_trace(x);
    let out = trace.last().unwrap();
    let diff = out - target;
    let count = diff.len() as f64;
    let loss = diff.mapv(|v| v * v).sum() / count;
    let (grads, _) = model.backward(&trace, diff * (2.0 / count));
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

/// Freshly initialised classifier: normaliser fitted to `x`, He-initialised
/// rectifier hidden layers, softmax output.
pub fn init_classifier(
    x: &Array2<f64>,
    n_classes: usize,
    arch: &ClassifierConfig,
    seed: u64,
) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![x.ncols()];
    widths.extend(&arch.hidden);
    widths.push(n_classes);
    let n_layers = widths.len() - 1;
    let layers = (0..n_layers)
        .map(|l| {
            let act = if l + 1 == n_layers {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            Dense::init(widths[l], widths[l + 1], act, &mut rng)
        })
        .collect();
    MlpParams::new(Standardizer::fit(x), layers)
}

fn check_training_labels(x: &Array2<f64>, labels: &[usize], n_classes: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("classifier training set"));
    }
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange(format!(
            "label {bad} with {n_classes} classes"
        )));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

pub fn train_classifier(
    x: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    arch: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    check_training_labels(x, labels, n_classes)?;
    let mut model = init_classifier(x, n_classes, arch, cfg.seed);
    fit_cross_entropy(&mut model, x, labels, cfg)?;
    Ok(model)
}

/// Continues training `model` on new data, keeping its input normaliser.
pub fn fine_tune_classifier(
    model: &MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    model.check_dim(x)?;
    check_training_labels(x, labels, model.output_dim())?;
    let mut model = model.clone();
    fit_cross_entropy(&mut model, x, labels, cfg)?;
    Ok(model)
}

fn fit_cross_entropy(
    model: &mut MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.learning_rate);
    for_each_minibatch(x.nrows(), cfg, &mut rng, |idx, step| {
        let xb = select_rows(x, idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = cross_entropy_grad(model, &xb, &yb);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.step(model.param_slices_mut(), grad_slices(&grads));
        Ok(())
    })?;
    model.theta_star = true;
    Ok(())
}

/// Trains `model` in place on an MSE objective.
pub(crate) fn fit_mse(
    model: &mut MlpParams,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.learning_rate);
    for_each_minibatch(inputs.nrows(), cfg, &mut rng, |idx, step| {
        let xb = select_rows(inputs, idx);
        let tb = select_rows(targets, idx);
        let (loss, grads) = mse_grad(model, &xb, &tb);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.step(model.param_slices_mut(), grad_slices(&grads));
        Ok(())
    })
}

pub(crate) fn init_dense(
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Dense {
    Dense::init(fan_in, fan_out, activation, rng)
}

pub fn predict_proba(model: &MlpParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    model.check_dim(x)?;
    Ok(model.forward(x))
}

pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn predict(model: &MlpParams, x: &Array2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_proba(model, x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(r, _)| {
            let centre = if labels[r] == 1 { gap / 2.0 } else { -gap / 2.0 };
            centre + rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        // 6 sigma apart along each axis: a logistic regression on the mean
        // direction already separates these almost perfectly.
        let (x, y) = blobs(400, 6.0, 1);
        let model = train_classifier(&x, &y, 2, &ClassifierConfig::default(), &TrainConfig::default())
            .unwrap();
        let pred = predict(&model, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(model.theta_star);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Array2::zeros((4, 2));
        let err = train_classifier(&x, &[1, 1, 1, 1], 2, &ClassifierConfig::default(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::DegenerateLabels)));
        assert_eq!(Error::DegenerateLabels.to_string(), "degenerate label set");
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (x, y) = blobs(50, 2.0, 3);
        let cfg = TrainConfig {
            epochs: 0,
            min_steps: 100,
            ..TrainConfig::default()
        };
        let arch = ClassifierConfig::default();
        let mut trained = train_classifier(&x, &y, 2, &arch, &cfg).unwrap();
        trained.theta_star = false;
        assert_eq!(trained, init_classifier(&x, 2, &arch, cfg.seed));
    }

    #[test]
    fn softmax_rows_and_uniform_on_zero_weights() {
        let (x, _) = blobs(20, 2.0, 4);
        let mut model = init_classifier(&x, 3, &ClassifierConfig::default(), 9);
        let p = predict_proba(&model, &x).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let last = model.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let p = predict_proba(&model, &x).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn raising_a_logit_raises_its_probability() {
        let x = array![[0.3, -1.2]];
        let mut model = init_classifier(&x, 3, &ClassifierConfig { hidden: vec![] }, 2);
        model.input = Standardizer::identity(2);
        let before = predict_proba(&model, &x).unwrap()[[0, 1]];
        model.layers[0].bias[1] += 0.5;
        let after = predict_proba(&model, &x).unwrap()[[0, 1]];
        assert!(after > before);
    }

    #[test]
    fn dimension_mismatch() {
        let (x, _) = blobs(10, 2.0, 5);
        let model = init_classifier(&x, 2, &ClassifierConfig::default(), 0);
        assert!(matches!(
            predict_proba(&model, &Array2::zeros((3, 5))),
            Err(Error::DimensionMismatch { expected: 2, got: 5 })
        ));
    }
}
