use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::evaluation::{BaselineKind, BaselineParams};
use crate::models::{ClassifierConfig, SpnConfig, TrainConfig};
use crate::signals::{KpiKind, Q1Window, N_SIGNALS};
use crate::{Error, Result};

/// Which detector decides when to retrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cdcsde,
    Ddm,
    Ph,
    Ewma,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cdcsde => "cdcsde",
            Method::Ddm => "ddm",
            Method::Ph => "ph",
            Method::Ewma => "ewma",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Cdcsde => None,
            Method::Ddm => Some(BaselineKind::Ddm),
            Method::Ph => Some(BaselineKind::Ph),
            Method::Ewma => Some(BaselineKind::Ewma),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cdcsde" => Some(Method::Cdcsde),
            "ddm" => Some(Method::Ddm),
            "ph" => Some(Method::Ph),
            "ewma" => Some(Method::Ewma),
            _ => None,
        }
    }
}

fn default_retrain_train() -> TrainConfig {
    TrainConfig {
        min_steps: 400,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    pub warm_start_batches: usize,
    pub kpi: KpiKind,
    /// Delivered KPI values kept for q1.
    pub kpi_window: usize,
    pub kpi_decay: f64,
    /// q1 while fewer than `kpi_window` values have been delivered.
    pub q1_window: Q1Window,
    pub hellinger_bins: usize,
    pub classifier: ClassifierConfig,
    /// Autoencoder bottleneck; 6 for feature vectors, 500 for unstructured
    /// inputs when absent.
    pub embedding_width: Option<usize>,
    /// Measure q3 and q5 on encoder embeddings; decided by the stream type
    /// when absent.
    pub embed: Option<bool>,
    pub spn: SpnConfig,
    pub kfac_damping: f64,
    pub train: TrainConfig,
    /// Optimiser settings when retraining after a drift; `min_steps` keeps
    /// small retraining sets from being underfit.
    #[serde(default = "default_retrain_train")]
    pub retrain: TrainConfig,
    pub control: ControlConfig,
    /// Floor on q1's `s_min`. The KPI moves in steps of one sample per batch,
    /// and an error-free stretch leaves `s_min` near zero, so the first
    /// misclassified sample would otherwise read as drift.
    pub kpi_eps_floor: f64,
    /// Steps used for retraining when no signal has a warning zone.
    pub fallback_window: usize,
    /// Keep only the most recent batches of a retraining set. Long warning
    /// zones otherwise pull in batches from before the change.
    pub max_retrain_batches: Option<usize>,
    /// When the pending classifier refit runs, also train on the labeled
    /// batches served since the drift.
    pub refit_includes_recent: bool,
    pub reset_after_retrain: bool,
    pub include_warm_start: bool,
    /// Continue training the current classifier instead of starting over.
    pub fine_tune: bool,
    /// Steps to wait for outstanding retraining labels before refitting the
    /// classifier with whatever has arrived.
    pub max_label_wait: usize,
    /// Signals taking part in the vote (q1..q6).
    pub signals: [bool; N_SIGNALS],
    pub baselines: BaselineParams,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            warm_start_batches: 50,
            kpi: KpiKind::ErrorRate,
            kpi_window: 10,
            kpi_decay: 0.7,
            q1_window: Q1Window::Rescaled,
            hellinger_bins: 10,
            classifier: ClassifierConfig::default(),
            embedding_width: None,
            embed: None,
            spn: SpnConfig::default(),
            kfac_damping: 1e-3,
            train: TrainConfig::default(),
            retrain: default_retrain_train(),
            control: ControlConfig::default(),
            kpi_eps_floor: 0.005,
            fallback_window: 10,
            max_retrain_batches: Some(4),
            refit_includes_recent: true,
            reset_after_retrain: true,
            include_warm_start: false,
            fine_tune: true,
            max_label_wait: 20,
            signals: [true; N_SIGNALS],
            baselines: BaselineParams::default(),
        }
    }
}

impl ServingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.warm_start_batches == 0 {
            return bad("warm_start_batches must be positive");
        }
        if self.kpi_window == 0 {
            return bad("kpi_window must be positive");
        }
        if !(self.kpi_decay > 0.0 && self.kpi_decay < 1.0) {
            return bad("kpi_decay must lie in (0, 1)");
        }
        if !(self.kpi_eps_floor >= 0.0) {
            return bad("kpi_eps_floor must be non-negative");
        }
        if self.hellinger_bins == 0 {
            return bad("hellinger_bins must be positive");
        }
        if self.embedding_width == Some(0) {
            return bad("embedding_width must be positive");
        }
        if self.spn.groups == 0 || self.spn.components == 0 || !(self.spn.sigma_floor > 0.0) {
            return bad("spn groups, components and sigma_floor must be positive");
        }
        if !(self.kfac_damping > 0.0) {
            return bad("kfac_damping must be positive");
        }
        if self.control.warmup == 0 || !(self.control.eps_floor > 0.0) {
            return bad("control warmup and eps_floor must be positive");
        }
        if self.max_retrain_batches == Some(0) {
            return bad("max_retrain_batches must be positive");
        }
        if self.fallback_window == 0 {
            return bad("fallback_window must be positive");
        }
        if !self.signals.iter().any(|&b| b) {
            return bad("at least one signal must be enabled");
        }
        for t in [&self.train, &self.retrain] {
            if !(t.learning_rate > 0.0) || t.minibatch == 0 {
                return bad("learning_rate and minibatch must be positive");
            }
        }
        let ewma = &self.baselines.ewma;
        if !(0.0..1.0).contains(&ewma.decay) {
            return bad("baselines.ewma.decay must lie in [0, 1)");
        }
        Ok(())
    }
}
