//! Kronecker-factored Fisher approximation for the classifier layers.
//!
//! For a dense layer with (bias-augmented) input activations `a` and
//! pre-activation gradients `g`, the Fisher block is approximated by
//! `A ⊗ G` with `A = E[a aᵀ]` and `G = E[g gᵀ]`. The natural gradient of the
//! weight matrix is then `(G + λI)⁻¹ ∇W (A + λI)⁻¹`.

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::linalg::{damped, spd_inverse};
use super::mlp::MlpParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacFactors {
    /// Input covariance, `(in + 1) x (in + 1)` including the bias row.
    pub a: Array2<f64>,
    /// Pre-activation gradient covariance, `out x out`.
    pub g: Array2<f64>,
    a_inv: Array2<f64>,
    g_inv: Array2<f64>,
}

impl KfacFactors {
    pub fn new(a: Array2<f64>, g: Array2<f64>, damping: f64) -> Result<Self> {
        let a_inv = spd_inverse(&damped(&a, damping))?;
        let g_inv = spd_inverse(&damped(&g, damping))?;
        Ok(Self { a, g, a_inv, g_inv })
    }

    pub fn damped_a_inverse(&self) -> &Array2<f64> {
        &self.a_inv
    }

    pub fn damped_g_inverse(&self) -> &Array2<f64> {
        &self.g_inv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacState {
    pub layers: Vec<KfacFactors>,
    pub damping: f64,
    /// Total parameter count `u` of the model.
    pub n_params: usize,
}

impl KfacState {
    /// Assembles a state from explicit factors (used for hand-built cases).
    pub fn from_factors(factors: Vec<(Array2<f64>, Array2<f64>)>, damping: f64, n_params: usize) -> Result<Self> {
        let layers = factors
            .into_iter()
            .map(|(a, g)| KfacFactors::new(a, g, damping))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            damping,
            n_params,
        })
    }
}

fn with_bias_column(a: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), a.view(), Array2::ones((a.nrows(), 1)).view()]
}

/// Per-sample pre-activation gradients of the cross-entropy at the true
/// labels, plus the bias-augmented layer inputs.
fn per_sample_terms(
    model: &MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let trace = model.forward_trace(x);
    let mut d = trace.last().unwrap().clone();
    for (r, &y) in labels.iter().enumerate() {
        d[[r, y]] -= 1.0;
    }
    let (_, deltas) = model.backward(&trace, d);
    let inputs = trace[..model.layers.len()]
        .iter()
        .map(with_bias_column)
        .collect();
    (inputs, deltas)
}

fn check_labeled(model: &MlpParams, x: &Array2<f64>, labels: &[usize]) -> Result<()> {
    model.check_dim(x)?;
    if labels.is_empty() || x.nrows() == 0 {
        return Err(Error::MissingLabels("empty labeled batch".into()));
    }
    if labels.len() != x.nrows() {
        return Err(Error::MissingLabels(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.output_dim()) {
        return Err(Error::OutOfRange(format!("label {bad}")));
    }
    Ok(())
}

/// Empirical-Fisher Kronecker factors of every classifier layer.
pub fn compute_kfac(
    model: &MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
    damping: f64,
) -> Result<KfacState> {
    check_labeled(model, x, labels)?;
    let n = x.nrows() as f64;
    let (inputs, deltas) = per_sample_terms(model, x, labels);
    let layers = inputs
        .iter()
        .zip(&deltas)
        .map(|(a, g)| KfacFactors::new(a.t().dot(a) / n, g.t().dot(g) / n, damping))
        .collect::<Result<_>>()?;
    Ok(KfacState {
        layers,
        damping,
        n_params: model.n_params(),
    })
}

/// Gradient of the mean cross-entropy for each layer as `[∇W | ∇b]`.
pub fn augmented_gradients(
    model: &MlpParams,
    x: &Array2<f64>,
    labels: &[usize],
) -> Result<Vec<Array2<f64>>> {
    check_labeled(model, x, labels)?;
    let n = x.nrows() as f64;
    let (inputs, deltas) = per_sample_terms(model, x, labels);
    Ok(inputs
        .iter()
        .zip(&deltas)
        .map(|(a, g)| g.t().dot(a) / n)
        .collect())
}

/// `‖∇_N Loss‖² / u`, with the natural gradient formed layer by layer from
/// the damped Kronecker factors.
pub fn natural_gradient_sq_norm(
    model: &MlpParams,
    kfac: &KfacState,
    x: &Array2<f64>,
    labels: &[usize],
) -> Result<f64> {
    let grads = augmented_gradients(model, x, labels)?;
    if grads.len() != kfac.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: kfac.layers.len(),
            got: grads.len(),
        });
    }
    let mut total = 0.0;
    for (grad, f) in grads.iter().zip(&kfac.layers) {
        if f.a.nrows() != grad.ncols() || f.g.nrows() != grad.nrows() {
            return Err(Error::DimensionMismatch {
                expected: f.a.nrows(),
                got: grad.ncols(),
            });
        }
        let nat = f.g_inv.dot(grad).dot(&f.a_inv);
        total += nat.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / kfac.n_params as f64)
}

/// Flattened (column-major per layer) gradient, matching `vec(∇W)` in the
/// Kronecker identity `(A ⊗ G) vec(V) = vec(G V A)`.
pub fn vectorised(grads: &[Array2<f64>]) -> Array1<f64> {
    grads
        .iter()
        .flat_map(|g| g.t().iter().copied().collect::<Vec<_>>())
        .collect()
}
