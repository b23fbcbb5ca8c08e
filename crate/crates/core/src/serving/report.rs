use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::control::Zone;
use crate::signals::ScoreVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Predict,
    Deliver,
    ZoneChange,
    Drift,
    Retrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub event: EventKind,
    pub payload: Value,
}

impl Event {
    pub fn new(step: usize, event: EventKind, payload: Value) -> Self {
        Self {
            step,
            event,
            payload,
        }
    }
}

pub fn write_events_jsonl<W: Write>(mut out: W, events: &[Event]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}

/// How the classifier was handled at a retraining event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierUpdate {
    Retrained,
    /// Labels are still outstanding; a refit follows once they arrive.
    RetrainedPending,
    /// No usable labels yet; the refit waits for deliveries.
    Pending,
    /// No usable labels at all; the old classifier stays in force.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub step: usize,
    /// `drift` for the retraining a drift triggers, `refit` for a later
    /// classifier refit once labels have arrived.
    pub kind: String,
    pub batches: Vec<usize>,
    pub rows: usize,
    pub labeled_rows: usize,
    pub fallback: bool,
    pub classifier: ClassifierUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiPoint {
    pub delivered_at: usize,
    pub for_step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub scores: ScoreVector,
    pub zones: Vec<Zone>,
    pub drift: bool,
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    /// First and last served step (inclusive).
    pub first_step: usize,
    pub last_step: usize,
    /// Accuracy of each served batch once its labels arrived, keyed by step.
    pub accuracy: BTreeMap<usize, f64>,
    pub alarms: Vec<usize>,
    pub retrains: Vec<RetrainRecord>,
    pub kpi_series: Vec<KpiPoint>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<Event>,
}

impl RunReport {
    pub fn empty(method: &str, first_step: usize) -> Self {
        Self {
            method: method.to_string(),
            first_step,
            last_step: first_step,
            accuracy: BTreeMap::new(),
            alarms: Vec::new(),
            retrains: Vec::new(),
            kpi_series: Vec::new(),
            steps: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Mean resolved per-batch accuracy; batches whose labels never arrived
    /// are left out.
    pub fn mean_accuracy(&self) -> Option<f64> {
        if self.accuracy.is_empty() {
            return None;
        }
        Some(self.accuracy.values().sum::<f64>() / self.accuracy.len() as f64)
    }

    /// Rebuilds the metric-relevant parts of a report from its event log.
    pub fn from_events(method: &str, events: &[Event]) -> Result<Self> {
        let mut first = None;
        let mut last = 0;
        let mut report = Self::empty(method, 0);
        for e in events {
            match e.event {
                EventKind::Predict => {
                    first.get_or_insert(e.step);
                    last = e.step;
                }
                EventKind::Deliver => {
                    let get = |k: &str| {
                        e.payload[k].as_f64().ok_or_else(|| {
                            Error::Config(format!("deliver event at step {} lacks `{k}`", e.step))
                        })
                    };
                    let for_step = get("for_step")? as usize;
                    let correct = get("correct")?;
                    let total = get("total")?;
                    report.accuracy.insert(for_step, correct / total);
                    report.kpi_series.push(KpiPoint {
                        delivered_at: e.step,
                        for_step,
                        value: get("kpi")?,
                    });
                }
                EventKind::Drift => report.alarms.push(e.step),
                EventKind::ZoneChange | EventKind::Retrain => {}
            }
        }
        report.first_step = first.unwrap_or(0);
        report.last_step = last;
        report.events = events.to_vec();
        Ok(report)
    }

    /// `step,q1..q6,z1..` rows for offline analysis.
    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n_zones = self.steps.first().map_or(0, |s| s.zones.len());
        let mut header: Vec<String> = vec!["step".into()];
        header.extend((1..=6).map(|i| format!("q{i}")));
        header.extend((1..=n_zones).map(|i| format!("zone{i}")));
        header.push("drift".into());
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.steps {
            let mut row = vec![s.scores.step.to_string()];
            row.extend(s.scores.q.iter().map(|q| q.map_or(String::new(), |v| v.to_string())));
            row.extend(s.zones.iter().map(|z| z.as_str().to_string()));
            row.push(s.drift.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn deliver_payload(for_step: usize, correct: usize, total: usize, kpi: f64, fresh: bool) -> Value {
    json!({
        "for_step": for_step,
        "correct": correct,
        "total": total,
        "kpi": kpi,
        "fresh": fresh,
    })
}
