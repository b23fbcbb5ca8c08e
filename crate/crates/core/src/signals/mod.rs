//! The six per-batch drift statistics.
//!
//! | signal | input | statistic |
//! |--------|-------|-----------|
//! | q1 | delivered KPI values | weighted moving average |
//! | q2 | predicted probabilities | overlap of top-1 / top-2 Gaussians |
//! | q3 | features (or embeddings) | Hellinger distance to training bins |
//! | q4 | features | `tanh` of relative reconstruction error |
//! | q5 | features (or embeddings) | `log(-ll)` under the SPN |
//! | q6 | delivered labeled batches | natural-gradient squared norm |
//!
//! The KPI of a delivered batch is computed from the prediction made when
//! that batch arrived, paired with its own labels.

mod hellinger;
mod kpi;
mod uncertainty;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use hellinger::{hellinger_term, q3_hellinger, HellingerBins};
pub use kpi::{kpi, q1_ewma_delayed_kpi, q1_windowed, KpiBuffer, KpiKind, Q1Window};
pub use uncertainty::{gaussian_overlap, q2_model_uncertainty};

use crate::models::{
    natural_gradient_sq_norm, reconstruction_mse, spn_loglik, AutoencoderModel, KfacState,
    MlpParams, SpnModel,
};
use crate::Result;

pub const N_SIGNALS: usize = 6;

/// Substitute for a zero training reconstruction loss.
pub const MIN_TRAIN_LOSS: f64 = 1e-12;
/// Floor on `-ll` before taking its logarithm.
pub const MIN_NEG_LOGLIK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub step: usize,
    /// `q[0]` is q1, ..., `q[5]` is q6.
    pub q: [Option<f64>; N_SIGNALS],
    /// The autoencoder's training loss was zero and was replaced.
    #[serde(default)]
    pub degenerate_train_loss: bool,
    /// The mean log-likelihood was non-negative and was clamped.
    #[serde(default)]
    pub clamped_loglik: bool,
}

impl ScoreVector {
    pub fn empty(step: usize) -> Self {
        Self {
            step,
            q: [None; N_SIGNALS],
            degenerate_train_loss: false,
            clamped_loglik: false,
        }
    }
}

/// `tanh(l_te / l_tr)`; the flag reports a zero `l_tr` that was replaced.
pub fn q4_from_losses(l_te: f64, l_tr: f64) -> (f64, bool) {
    if l_tr > 0.0 {
        ((l_te / l_tr).tanh(), false)
    } else {
        ((l_te / MIN_TRAIN_LOSS).tanh(), true)
    }
}

pub fn q4_ae_score(ae: &AutoencoderModel, batch: &Array2<f64>) -> Result<(f64, bool)> {
    Ok(q4_from_losses(reconstruction_mse(ae, batch)?, ae.training_loss))
}

/// `log(-ll)`; the flag reports a non-negative `ll` that was clamped.
pub fn q5_from_loglik(ll: f64) -> (f64, bool) {
    if ll < 0.0 {
        ((-ll).max(MIN_NEG_LOGLIK).ln(), false)
    } else {
        (MIN_NEG_LOGLIK.ln(), true)
    }
}

pub fn q5_spn_score(spn: &SpnModel, batch: &Array2<f64>) -> Result<(f64, bool)> {
    Ok(q5_from_loglik(spn_loglik(spn, batch)?))
}

/// Mean natural-gradient score over the labeled batches delivered this
/// step; `None` when nothing was delivered.
pub fn q6_gradient_score(
    model: &MlpParams,
    kfac: &KfacState,
    delivered: &[(&Array2<f64>, &[usize])],
) -> Result<Option<f64>> {
    if delivered.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (x, y) in delivered {
        total += natural_gradient_sq_norm(model, kfac, x, y)?;
    }
    Ok(Some(total / delivered.len() as f64))
}

/// Unsupervised models behind q3, q4 and q5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModels {
    pub autoencoder: AutoencoderModel,
    /// Fitted on encoder embeddings when `embed` is set, raw features
    /// otherwise; likewise `bins`.
    pub spn: SpnModel,
    pub bins: HellingerBins,
    pub embed: bool,
}

impl DensityModels {
    /// The representation q3 and q5 are measured on.
    pub fn density_input(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if self.embed {
            self.autoencoder.encode(features)
        } else {
            Ok(features.clone())
        }
    }
}

/// Everything a step's statistics depend on. Signals whose models are
/// missing, or that are disabled, come out absent.
pub struct ScoreContext<'a> {
    pub step: usize,
    pub features: &'a Array2<f64>,
    /// Classifier output on `features`.
    pub proba: &'a Array2<f64>,
    pub classifier: &'a MlpParams,
    pub kfac: Option<&'a KfacState>,
    pub density: Option<&'a DensityModels>,
    pub kpi: &'a KpiBuffer,
    pub q1_window: Q1Window,
    /// Labeled batches delivered this step that the current classifier
    /// predicted.
    pub delivered: &'a [(&'a Array2<f64>, &'a [usize])],
    pub enabled: [bool; N_SIGNALS],
}

pub fn compute_scores(ctx: &ScoreContext) -> Result<ScoreVector> {
    let mut out = ScoreVector::empty(ctx.step);
    let on = ctx.enabled;
    if on[0] {
        out.q[0] = q1_windowed(ctx.kpi, ctx.q1_window);
    }
    if on[1] {
        out.q[1] = Some(q2_model_uncertainty(ctx.proba)?);
    }
    if let Some(m) = ctx.density {
        if on[2] || on[4] {
            let z = m.density_input(ctx.features)?;
            if on[2] {
                out.q[2] = Some(q3_hellinger(&m.bins, &z)?);
            }
            if on[4] {
                let (v, flag) = q5_spn_score(&m.spn, &z)?;
                out.q[4] = Some(v);
                out.clamped_loglik = flag;
            }
        }
        if on[3] {
            let (v, flag) = q4_ae_score(&m.autoencoder, ctx.features)?;
            out.q[3] = Some(v);
            out.degenerate_train_loss = flag;
        }
    }
    if let (true, Some(kfac)) = (on[5], ctx.kfac) {
        out.q[5] = q6_gradient_score(ctx.classifier, kfac, ctx.delivered)?;
    }
    Ok(out)
}
