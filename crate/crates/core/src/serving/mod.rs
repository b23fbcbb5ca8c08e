//! The serving loop: predict each batch, score it, run the detectors and
//! retrain when they report drift.
//!
//! Every batch is predicted with the models in force when it arrives, and
//! those predictions are archived so that a late label delivery is scored
//! against what was actually served. Labels of a batch often arrive after a
//! drift has already been acted on; the classifier is then trained on the
//! labeled part of the retraining set at once and refitted when the rest
//! arrives (or after `max_label_wait` steps).

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{Method, ServingConfig};
pub use report::{
    read_events_jsonl, write_events_jsonl, ClassifierUpdate, Event, EventKind, KpiPoint,
    RetrainRecord, RunReport, StepRecord,
};

use crate::control::{decide, ControlState, EnsembleDecision, Zone};
use crate::evaluation::BaselineDetector;
use crate::models::{
    argmax_rows, compute_kfac, fine_tune_classifier, predict_proba, train_autoencoder,
    train_classifier, train_spn, KfacState, MlpParams, TrainConfig,
};
use crate::signals::{
    compute_scores, kpi, DensityModels, HellingerBins, KpiBuffer, ScoreContext, ScoreVector,
    N_SIGNALS,
};
use crate::stream::{Batch, StreamStep};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

const SIGNAL_NAMES: [&str; N_SIGNALS] = ["q1", "q2", "q3", "q4", "q5", "q6"];

/// Deterministic per-purpose seed.
fn derive_seed(seed: u64, step: usize, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_CLASSIFIER: u64 = 1;
const SALT_AUTOENCODER: u64 = 2;
const SALT_SPN: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveEntry {
    features: Array2<f64>,
    predictions: Vec<usize>,
    /// Classifier generation that made `predictions`.
    generation: u64,
    labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingRefit {
    steps: Vec<usize>,
    drift_step: usize,
    deadline: usize,
}

/// Resolution of one label delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub for_step: usize,
    pub correct: usize,
    pub total: usize,
    pub kpi: f64,
    /// Predicted by the classifier now in force, so it feeds q1 and q6.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub predictions: Vec<usize>,
    pub resolved: Vec<Resolved>,
    pub scores: ScoreVector,
    /// One zone per signal for the ensemble, a single zone for a baseline.
    pub zones: Vec<Zone>,
    pub decision: Option<EnsembleDecision>,
    pub drift: bool,
    pub retrains: Vec<RetrainRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingSession {
    config: ServingConfig,
    method: Method,
    seed: u64,
    n_classes: usize,
    dim: usize,
    classifier: MlpParams,
    generation: u64,
    kfac: Option<KfacState>,
    density: Option<DensityModels>,
    embedding_width: usize,
    states: [ControlState; N_SIGNALS],
    baseline: Option<BaselineDetector>,
    kpi: KpiBuffer,
    archive: BTreeMap<usize, ArchiveEntry>,
    warm_data: Option<(Array2<f64>, Vec<usize>)>,
    pending: Option<PendingRefit>,
    next_step: usize,
    events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    session: ServingSession,
}

#[derive(Deserialize)]
struct CheckpointHeader {
    version: u32,
}

fn stack(parts: &[ArrayView2<f64>], dim: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, dim));
    }
    concatenate(Axis(0), parts).expect("equal widths")
}

fn two_classes(labels: &[usize]) -> bool {
    labels.iter().any(|&y| y != labels[0])
}

impl ServingSession {
    /// Trains every model on the first `warm_start_batches` batches, whose
    /// labels are known up front.
    pub fn warm_start(
        batches: &[Batch],
        n_classes: usize,
        unstructured: bool,
        method: Method,
        config: &ServingConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let n_train = config.warm_start_batches;
        if batches.len() < n_train {
            return Err(Error::StreamTooShort {
                needed: n_train,
                got: batches.len(),
            });
        }
        let train = &batches[..n_train];
        let dim = train[0].dim();
        let views: Vec<_> = train.iter().map(|b| b.features.view()).collect();
        let x = stack(&views, dim);
        let y: Vec<usize> = train.iter().flat_map(|b| b.labels().iter().copied()).collect();
        let embed = config.embed.unwrap_or(unstructured);
        let embedding_width = config
            .embedding_width
            .unwrap_or(if unstructured { 500 } else { 6 });
        let start = train[0].step;
        let classifier = train_classifier(
            &x,
            &y,
            n_classes,
            &config.classifier,
            &config.train.with_seed(derive_seed(seed, start, SALT_CLASSIFIER)),
        )?;
        let mut session = Self {
            config: config.clone(),
            method,
            seed,
            n_classes,
            dim,
            kfac: None,
            density: None,
            embedding_width,
            states: std::array::from_fn(|j| {
                let mut c = config.control.clone();
                if j == 0 {
                    c.eps_floor = c.eps_floor.max(config.kpi_eps_floor);
                }
                ControlState::new(c)
            }),
            baseline: method
                .baseline()
                .map(|k| BaselineDetector::new(k, &config.baselines)),
            kpi: KpiBuffer::new(config.kpi_window, config.kpi_decay),
            archive: BTreeMap::new(),
            warm_data: None,
            pending: None,
            next_step: train[n_train - 1].step + 1,
            events: Vec::new(),
            classifier,
            generation: 0,
        };
        if method == Method::Cdcsde {
            session.kfac = session.fit_kfac(&x, &y)?;
            let uses_density = config.signals[2..5].iter().any(|&b| b);
            if uses_density {
                session.density = Some(session.fit_density(&x, embed, start, &config.train)?);
            }
        }
        if config.include_warm_start {
            session.warm_data = Some((x, y));
        }
        Ok(session)
    }

    fn fit_kfac(&self, x: &Array2<f64>, y: &[usize]) -> Result<Option<KfacState>> {
        if self.method != Method::Cdcsde || !self.config.signals[5] {
            return Ok(None);
        }
        compute_kfac(&self.classifier, x, y, self.config.kfac_damping).map(Some)
    }

    fn fit_density(
        &self,
        x: &Array2<f64>,
        embed: bool,
        step: usize,
        train: &TrainConfig,
    ) -> Result<DensityModels> {
        let autoencoder = train_autoencoder(
            x,
            self.embedding_width,
            &train.with_seed(derive_seed(self.seed, step, SALT_AUTOENCODER)),
        )?;
        let z = if embed { autoencoder.encode(x)? } else { x.clone() };
        let bins = HellingerBins::fit(&z, self.config.hellinger_bins)?;
        let spn = train_spn(
            &z,
            &self.config.spn,
            &train.with_seed(derive_seed(self.seed, step, SALT_SPN)),
        )?;
        Ok(DensityModels {
            autoencoder,
            spn,
            bins,
            embed,
        })
    }

    pub fn config(&self) -> &ServingConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn classifier(&self) -> &MlpParams {
        &self.classifier
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn density(&self) -> Option<&DensityModels> {
        self.density.as_ref()
    }

    pub fn kfac(&self) -> Option<&KfacState> {
        self.kfac.as_ref()
    }

    pub fn states(&self) -> &[ControlState; N_SIGNALS] {
        &self.states
    }

    pub fn kpi_buffer(&self) -> &KpiBuffer {
        &self.kpi
    }

    /// Steps currently held in the batch archive.
    pub fn archived_steps(&self) -> Vec<usize> {
        self.archive.keys().copied().collect()
    }

    pub fn has_pending_refit(&self) -> bool {
        self.pending.is_some()
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn included(&self) -> [bool; N_SIGNALS] {
        self.config.signals
    }

    pub fn step(&mut self, input: &StreamStep) -> Result<StepOutcome> {
        let step = input.batch.step;
        if step != self.next_step {
            return Err(Error::OutOfOrder {
                expected: self.next_step,
                got: step,
            });
        }
        let features = &input.batch.features;
        if features.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: features.ncols(),
            });
        }
        if features.nrows() == 0 {
            return Err(Error::EmptyInput("serving batch"));
        }

        // Labels first: they resolve earlier predictions and may complete a
        // pending classifier refit that should serve this batch.
        let mut resolved = Vec::with_capacity(input.deliveries.len());
        for d in &input.deliveries {
            let entry = self.archive.get_mut(&d.for_step).ok_or_else(|| {
                Error::MissingLabels(format!("delivery for unknown step {}", d.for_step))
            })?;
            if d.labels.len() != entry.predictions.len() {
                return Err(Error::DimensionMismatch {
                    expected: entry.predictions.len(),
                    got: d.labels.len(),
                });
            }
            let correct = d
                .labels
                .iter()
                .zip(&entry.predictions)
                .filter(|(y, p)| y == p)
                .count();
            let value = kpi(self.config.kpi, &d.labels, &entry.predictions, self.n_classes);
            entry.labels = Some(d.labels.clone());
            resolved.push(Resolved {
                for_step: d.for_step,
                correct,
                total: d.labels.len(),
                kpi: value,
                fresh: false,
            });
        }
        let mut retrains = Vec::new();
        if let Some(record) = self.refit_if_due(step)? {
            retrains.push(record);
        }
        for r in &mut resolved {
            r.fresh = self.archive[&r.for_step].generation == self.generation;
            self.events.push(Event::new(
                step,
                EventKind::Deliver,
                report::deliver_payload(r.for_step, r.correct, r.total, r.kpi, r.fresh),
            ));
        }

        let proba = predict_proba(&self.classifier, features)?;
        let predictions = argmax_rows(&proba);
        self.events.push(Event::new(
            step,
            EventKind::Predict,
            json!({ "rows": predictions.len(), "generation": self.generation }),
        ));
        self.archive.insert(
            step,
            ArchiveEntry {
                features: features.clone(),
                predictions: predictions.clone(),
                generation: self.generation,
                labels: None,
            },
        );

        let fresh: Vec<&Resolved> = resolved.iter().filter(|r| r.fresh).collect();
        for r in &fresh {
            self.kpi.push(r.for_step, r.kpi);
        }

        let (scores, zones, decision, drift, retrain_steps, fallback) = match self.method {
            Method::Cdcsde => {
                let labeled: Vec<(&Array2<f64>, &[usize])> = fresh
                    .iter()
                    .map(|r| {
                        let e = &self.archive[&r.for_step];
                        (&e.features, e.labels.as_deref().unwrap())
                    })
                    .collect();
                let scores = compute_scores(&ScoreContext {
                    step,
                    features,
                    proba: &proba,
                    classifier: &self.classifier,
                    kfac: self.kfac.as_ref(),
                    density: self.density.as_ref(),
                    kpi: &self.kpi,
                    q1_window: self.config.q1_window,
                    delivered: &labeled,
                    enabled: self.config.signals,
                })?;
                for (j, q) in scores.q.iter().enumerate() {
                    if let Some(q) = *q {
                        let before = self.states[j].zone();
                        let after = self.states[j].observe(q, step)?;
                        if before != after {
                            self.events.push(Event::new(
                                step,
                                EventKind::ZoneChange,
                                json!({
                                    "signal": SIGNAL_NAMES[j],
                                    "from": before,
                                    "to": after,
                                }),
                            ));
                        }
                    }
                }
                let decision =
                    decide(
                    &self.states,
                    &self.included(),
                    step,
                    self.config.fallback_window,
                );
                let zones = decision.votes.to_vec();
                let (drift, steps, fb) =
                    (decision.drift, decision.retrain_steps.clone(), decision.fallback);
                (scores, zones, Some(decision), drift, steps, fb)
            }
            _ => {
                let det = self.baseline.as_mut().expect("baseline detector");
                let before = det.zone();
                let mut drift = false;
                for r in &fresh {
                    drift |= det.observe(r.kpi, step)? == Zone::Drift;
                }
                let after = det.zone();
                if before != after {
                    self.events.push(Event::new(
                        step,
                        EventKind::ZoneChange,
                        json!({ "signal": self.method.name(), "from": before, "to": after }),
                    ));
                }
                let zone = if drift { Zone::Drift } else { after };
                let (steps, fb) = if drift {
                    let window = if det.warning_batches().is_empty() {
                        None
                    } else {
                        Some(det.warning_batches().to_vec())
                    };
                    match window {
                        Some(w) => (w, false),
                        None => {
                            let start = (step + 1).saturating_sub(self.config.fallback_window);
                            ((start..=step).collect(), true)
                        }
                    }
                } else {
                    (Vec::new(), false)
                };
                (ScoreVector::empty(step), vec![zone], None, drift, steps, fb)
            }
        };

        if drift {
            self.events.push(Event::new(
                step,
                EventKind::Drift,
                json!({
                    "rule": decision.as_ref().and_then(|d| d.rule),
                    "votes": zones,
                    "retrain_steps": retrain_steps,
                    "fallback": fallback,
                }),
            ));
            retrains.push(self.retrain(step, &retrain_steps, fallback)?);
        }
        self.evict(step);
        self.next_step = step + 1;
        Ok(StepOutcome {
            step,
            predictions,
            resolved,
            scores,
            zones,
            decision,
            drift,
            retrains,
        })
    }

    /// Labeled rows of the given archived steps (plus warm-start data when
    /// configured).
    fn labeled_rows(&self, steps: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut views = Vec::new();
        let mut labels = Vec::new();
        if let Some((x, y)) = &self.warm_data {
            views.push(x.view());
            labels.extend_from_slice(y);
        }
        for s in steps {
            if let Some(ArchiveEntry {
                features,
                labels: Some(y),
                ..
            }) = self.archive.get(s)
            {
                views.push(features.view());
                labels.extend_from_slice(y);
            }
        }
        (stack(&views, self.dim), labels)
    }

    /// Retrains the classifier on `(x, y)` and starts a new generation.
    /// Returns false when the labels cannot support a classifier.
    fn refit_classifier(&mut self, x: &Array2<f64>, y: &[usize], step: usize) -> Result<bool> {
        if y.is_empty() || !two_classes(y) {
            return Ok(false);
        }
        let cfg = self
            .config
            .retrain
            .with_seed(derive_seed(self.seed, step, SALT_CLASSIFIER));
        self.classifier = if self.config.fine_tune {
            fine_tune_classifier(&self.classifier, x, y, &cfg)?
        } else {
            train_classifier(x, y, self.n_classes, &self.config.classifier, &cfg)?
        };
        self.generation += 1;
        self.kfac = self.fit_kfac(x, y)?;
        self.kpi.clear();
        Ok(true)
    }

    fn refit_if_due(&mut self, step: usize) -> Result<Option<RetrainRecord>> {
        let Some(pending) = &self.pending else {
            return Ok(None);
        };
        let all_in = pending
            .steps
            .iter()
            .all(|s| self.archive.get(s).is_none_or(|e| e.labels.is_some()));
        if !all_in && step < pending.deadline {
            return Ok(None);
        }
        let mut pending = self.pending.take().unwrap();
        if self.config.refit_includes_recent {
            let recent = self
                .archive
                .range(pending.drift_step + 1..)
                .filter(|(_, e)| e.labels.is_some())
                .map(|(&s, _)| s);
            pending.steps.extend(recent);
        }
        let (x, y) = self.labeled_rows(&pending.steps);
        let refitted = self.refit_classifier(&x, &y, step)?;
        if refitted && self.config.reset_after_retrain {
            // Only the classifier changed: restart the statistics that
            // depend on it.
            for j in [0, 1, 5] {
                self.states[j].reset();
            }
            if let Some(b) = &mut self.baseline {
                b.reset();
            }
        }
        let record = RetrainRecord {
            step,
            kind: "refit".into(),
            batches: pending.steps,
            rows: x.nrows(),
            labeled_rows: y.len(),
            fallback: false,
            classifier: if refitted {
                ClassifierUpdate::Retrained
            } else {
                ClassifierUpdate::Skipped
            },
        };
        self.log_retrain(&record);
        Ok(Some(record))
    }

    fn retrain(&mut self, step: usize, steps: &[usize], fallback: bool) -> Result<RetrainRecord> {
        let steps = match self.config.max_retrain_batches {
            Some(cap) if steps.len() > cap => &steps[steps.len() - cap..],
            _ => steps,
        };
        let mut views = Vec::new();
        if let Some((x, _)) = &self.warm_data {
            views.push(x.view());
        }
        for s in steps {
            if let Some(e) = self.archive.get(s) {
                views.push(e.features.view());
            }
        }
        let x_all = stack(&views, self.dim);
        if let Some(d) = &self.density {
            let embed = d.embed;
            let retrain = self.config.retrain.clone();
            self.density = Some(self.fit_density(&x_all, embed, step, &retrain)?);
        }
        let (x, y) = self.labeled_rows(steps);
        let outstanding = steps
            .iter()
            .any(|s| self.archive.get(s).is_some_and(|e| e.labels.is_none()));
        let refitted = self.refit_classifier(&x, &y, step)?;
        self.pending = outstanding.then(|| PendingRefit {
            steps: steps.to_vec(),
            drift_step: step,
            deadline: step + self.config.max_label_wait,
        });
        let classifier = match (refitted, outstanding) {
            (true, false) => ClassifierUpdate::Retrained,
            (true, true) => ClassifierUpdate::RetrainedPending,
            (false, true) => ClassifierUpdate::Pending,
            (false, false) => ClassifierUpdate::Skipped,
        };
        if self.config.reset_after_retrain {
            for s in &mut self.states {
                s.reset();
            }
        }
        if let Some(b) = &mut self.baseline {
            b.reset();
        }
        let record = RetrainRecord {
            step,
            kind: "drift".into(),
            batches: steps.to_vec(),
            rows: x_all.nrows(),
            labeled_rows: y.len(),
            fallback,
            classifier,
        };
        self.log_retrain(&record);
        Ok(record)
    }

    fn log_retrain(&mut self, record: &RetrainRecord) {
        self.events.push(Event::new(
            record.step,
            EventKind::Retrain,
            json!({
                "kind": record.kind,
                "batches": record.batches,
                "rows": record.rows,
                "labeled_rows": record.labeled_rows,
                "fallback": record.fallback,
                "classifier": record.classifier,
                "generation": self.generation,
            }),
        ));
    }

    /// Drops batches that can no longer be needed: labeled, in no warning
    /// set or pending refit, and older than the fallback window.
    fn evict(&mut self, step: usize) {
        let horizon = (step + 1).saturating_sub(self.config.fallback_window);
        let mut keep: Vec<usize> = self
            .states
            .iter()
            .flat_map(|s| s.warning_batches().iter().copied())
            .collect();
        if let Some(b) = &self.baseline {
            keep.extend_from_slice(b.warning_batches());
        }
        if let Some(p) = &self.pending {
            keep.extend_from_slice(&p.steps);
        }
        keep.sort_unstable();
        self.archive.retain(|s, e| {
            *s >= horizon || e.labels.is_none() || keep.binary_search(s).is_ok()
        });
    }

    /// Serves every step and collects the report.
    pub fn run(&mut self, steps: impl IntoIterator<Item = StreamStep>) -> Result<RunReport> {
        let mut report = RunReport::empty(self.method.name(), self.next_step);
        for input in steps {
            let out = self.step(&input)?;
            report.last_step = out.step;
            for r in &out.resolved {
                report.accuracy.insert(r.for_step, r.correct as f64 / r.total as f64);
                report.kpi_series.push(KpiPoint {
                    delivered_at: out.step,
                    for_step: r.for_step,
                    value: r.kpi,
                });
            }
            if out.drift {
                report.alarms.push(out.step);
            }
            report.retrains.extend(out.retrains);
            report.steps.push(StepRecord {
                scores: out.scores,
                zones: out.zones,
                drift: out.drift,
            });
            report.events.append(&mut self.events);
        }
        Ok(report)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            session: self.clone(),
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_str(text)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cp: Checkpoint = serde_json::from_str(text)?;
        Ok(cp.session)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
