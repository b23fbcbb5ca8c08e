//! Detection metrics, baseline detectors and result tables.
//!
//! Alarms are attributed to true drifts by interval: the first alarm at or
//! after a true drift (and before the next one) detects it, every other
//! alarm is false. Times are in batches.

mod baselines;

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use baselines::{
    BaselineDetector, BaselineKind, BaselineParams, DdmParams, EwmaParams, PhParams,
};

use crate::serving::{Method, RunReport, ServingConfig, ServingSession};
use crate::stream::{schedule_labels, LagPolicy, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ma: f64,
    pub mtfa: Option<f64>,
    pub mtd: Option<f64>,
    /// Absent without ground truth.
    pub mdr: Option<f64>,
    pub td: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Attribution {
    /// Detection step for each true drift, in order.
    pub detections: Vec<Option<usize>>,
    pub false_alarms: Vec<usize>,
}

pub fn attribute_alarms(alarms: &[usize], truth: &[usize]) -> Attribution {
    let mut alarms = alarms.to_vec();
    alarms.sort_unstable();
    let mut truth = truth.to_vec();
    truth.sort_unstable();
    let mut out = Attribution {
        detections: vec![None; truth.len()],
        false_alarms: Vec::new(),
    };
    for a in alarms {
        // Index of the last true drift at or before the alarm.
        let k = truth.partition_point(|&t| t <= a);
        if k > 0 && out.detections[k - 1].is_none() {
            out.detections[k - 1] = Some(a);
        } else {
            out.false_alarms.push(a);
        }
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Metrics from alarm and truth steps plus the resolved mean accuracy.
pub fn metrics_from_parts(ma: f64, alarms: &[usize], truth: &[usize]) -> MetricSet {
    let td = alarms.len();
    if truth.is_empty() {
        return MetricSet {
            ma,
            mtfa: None,
            mtd: None,
            mdr: None,
            td,
        };
    }
    let mut sorted_truth = truth.to_vec();
    sorted_truth.sort_unstable();
    let att = attribute_alarms(alarms, &sorted_truth);
    let delays = att
        .detections
        .iter()
        .zip(&sorted_truth)
        .filter_map(|(d, &t)| d.map(|d| (d - t) as f64));
    let missed = att.detections.iter().filter(|d| d.is_none()).count();
    let mtfa = if att.false_alarms.len() < 2 {
        None
    } else {
        mean(att.false_alarms.windows(2).map(|w| (w[1] - w[0]) as f64))
    };
    MetricSet {
        ma,
        mtfa,
        mtd: mean(delays),
        mdr: Some(missed as f64 / sorted_truth.len() as f64),
        td,
    }
}

pub fn compute_metrics(report: &RunReport, truth: &[usize]) -> Result<MetricSet> {
    if let Some(&step) = report
        .alarms
        .iter()
        .find(|&&a| a < report.first_step || a > report.last_step)
    {
        return Err(Error::AlarmOutsideReport { step });
    }
    let ma = report
        .mean_accuracy()
        .ok_or(Error::EmptyInput("no resolved batch accuracies"))?;
    Ok(metrics_from_parts(ma, &report.alarms, truth))
}

/// Warm-starts a session on the head of `stream` and serves the rest with
/// labels delivered according to `lag`.
pub fn run_method(
    stream: &Stream,
    lag: &LagPolicy,
    method: Method,
    config: &ServingConfig,
    seed: u64,
    unstructured: bool,
) -> Result<RunReport> {
    let mut session = ServingSession::warm_start(
        &stream.batches,
        stream.n_classes,
        unstructured,
        method,
        config,
        seed,
    )?;
    let rest = stream.batches[config.warm_start_batches..].iter().cloned();
    session.run(schedule_labels(rest, lag))
}

/// The serving loop with a single baseline detector on the delayed KPI.
pub fn run_baseline(
    stream: &Stream,
    lag: &LagPolicy,
    kind: BaselineKind,
    config: &ServingConfig,
    seed: u64,
) -> Result<(RunReport, MetricSet)> {
    let method = match kind {
        BaselineKind::Ddm => Method::Ddm,
        BaselineKind::Ph => Method::Ph,
        BaselineKind::Ewma => Method::Ewma,
    };
    let report = run_method(stream, lag, method, config, seed, false)?;
    let metrics = compute_metrics(&report, &stream.drift_truth)?;
    Ok((report, metrics))
}

/// Seed-averaged metrics for one row of a table. Optional columns average
/// over the runs where they are present.
pub fn average_metrics(sets: &[MetricSet]) -> Option<MetricSet> {
    if sets.is_empty() {
        return None;
    }
    let n = sets.len() as f64;
    Some(MetricSet {
        ma: sets.iter().map(|m| m.ma).sum::<f64>() / n,
        mtfa: mean(sets.iter().filter_map(|m| m.mtfa)),
        mtd: mean(sets.iter().filter_map(|m| m.mtd)),
        mdr: mean(sets.iter().filter_map(|m| m.mdr)),
        td: (sets.iter().map(|m| m.td).sum::<usize>() as f64 / n).round() as usize,
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// `label,ma,mtfa,mtd,mdr,td`, blank cells for absent values.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricSet)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["label", "ma", "mtfa", "mtd", "mdr", "td"])
        .map_err(err)?;
    for (label, m) in rows {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        w.write_record([
            label.clone(),
            m.ma.to_string(),
            cell(m.mtfa),
            cell(m.mtd),
            cell(m.mdr),
            m.td.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table with MA as a percentage.
pub fn format_table(rows: &[(String, MetricSet)]) -> String {
    let header = ["", "MA", "MTFA", "MTD", "MDR", "TD"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(label, m)| {
            [
                label.clone(),
                format!("{:.2}", 100.0 * m.ma),
                opt(m.mtfa, 1),
                opt(m.mtd, 1),
                opt(m.mdr, 3),
                m.td.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {c:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(&header.map(String::from));
    for row in &body {
        line(row);
    }
    out
}
