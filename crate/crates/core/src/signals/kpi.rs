use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpiKind {
    ErrorRate,
    OneMinusF1,
}

/// How q1 behaves while the KPI buffer holds fewer than `capacity` values.
///
/// The raw weighted sum grows as the buffer fills, which a control state
/// reads as a rising score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Q1Window {
    /// Raw sum over whatever has been delivered.
    Partial,
    /// Absent until the buffer is full.
    Full,
    /// Partial sums scaled by the weight a full window would carry.
    Rescaled,
}

/// Classifier KPI on one delivered batch; lower is better.
pub fn kpi(kind: KpiKind, labels: &[usize], predictions: &[usize], n_classes: usize) -> f64 {
    assert_eq!(labels.len(), predictions.len());
    if labels.is_empty() {
        return 0.0;
    }
    match kind {
        KpiKind::ErrorRate => {
            let wrong = labels.iter().zip(predictions).filter(|(y, p)| y != p).count();
            wrong as f64 / labels.len() as f64
        }
        KpiKind::OneMinusF1 => 1.0 - f1_score(labels, predictions, n_classes),
    }
}

/// Positive-class F1 for two classes, macro F1 over present classes
/// otherwise.
fn f1_score(labels: &[usize], predictions: &[usize], n_classes: usize) -> f64 {
    let f1_for = |c: usize| {
        let tp = labels.iter().zip(predictions).filter(|&(&y, &p)| y == c && p == c).count();
        let fp = labels.iter().zip(predictions).filter(|&(&y, &p)| y != c && p == c).count();
        let fn_ = labels.iter().zip(predictions).filter(|&(&y, &p)| y == c && p != c).count();
        if tp == 0 {
            // Nothing to find and nothing falsely claimed counts as perfect.
            return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
        }
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    if n_classes == 2 {
        return f1_for(1);
    }
    let present: Vec<usize> = (0..n_classes).filter(|c| labels.contains(c)).collect();
    present.iter().map(|&c| f1_for(c)).sum::<f64>() / present.len().max(1) as f64
}

/// The newest `capacity` delivered KPI values, ordered by the step of the
/// batch they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiBuffer {
    capacity: usize,
    decay: f64,
    entries: VecDeque<(usize, f64)>,
}

impl KpiBuffer {
    pub fn new(capacity: usize, decay: f64) -> Self {
        assert!(capacity >= 1, "capacity must be positive");
        assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0, 1)");
        Self {
            capacity,
            decay,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn push(&mut self, for_step: usize, value: f64) {
        let at = self.entries.partition_point(|&(s, _)| s <= for_step);
        self.entries.insert(at, (for_step, value));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied()
    }
}

/// Exponentially weighted sum of the delayed KPI: the newest value carries
/// weight `w`, the one before it `w²`, and so on back to `w^k`.
pub fn q1_ewma_delayed_kpi(buffer: &KpiBuffer) -> Option<f64> {
    if buffer.is_empty() {
        return None;
    }
    let mut weight = buffer.decay;
    let mut total = 0.0;
    for &(_, v) in buffer.entries.iter().rev() {
        total += weight * v;
        weight *= buffer.decay;
    }
    Some(total)
}

/// q1 under a partial-window policy; identical to
/// [`q1_ewma_delayed_kpi`] once the buffer is full.
pub fn q1_windowed(buffer: &KpiBuffer, policy: Q1Window) -> Option<f64> {
    let raw = q1_ewma_delayed_kpi(buffer)?;
    if buffer.is_full() {
        return Some(raw);
    }
    match policy {
        Q1Window::Partial => Some(raw),
        Q1Window::Full => None,
        Q1Window::Rescaled => {
            let w = buffer.decay;
            let mass = |n: usize| (1..=n).map(|j| w.powi(j as i32)).sum::<f64>();
            Some(raw * mass(buffer.capacity) / mass(buffer.len()))
        }
    }
}
