//! Per-signal statistical control and the ensemble vote.
//!
//! Each signal's scores feed a [`ControlState`] that tracks the progressive
//! mean `p_i`, the population standard deviation `s_i` of `p_1..p_i`, and
//! the point where `p + s` was smallest. Relative to that minimum, `p + s`
//! beyond two deviations is a warning and beyond three is a drift.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::signals::N_SIGNALS;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    Safe,
    Warning,
    Drift,
}

impl Zone {
    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Safe => "safe",
            Zone::Warning => "warning",
            Zone::Drift => "drift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Observations before zones are evaluated; the running minimum is
    /// only tracked from this point on.
    pub warmup: usize,
    pub eps_floor: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            warmup: 20,
            eps_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub config: ControlConfig,
    count: usize,
    sum: f64,
    // Welford accumulators over the progressive means.
    p_mean: f64,
    p_m2: f64,
    p: f64,
    s: f64,
    minimum: Option<(f64, f64)>,
    zone: Zone,
    warning_batches: Vec<usize>,
}

impl ControlState {
    pub fn new(config: ControlConfig) -> Self {
        Self {
            config,
            count: 0,
            sum: 0.0,
            p_mean: 0.0,
            p_m2: 0.0,
            p: 0.0,
            s: 0.0,
            minimum: None,
            zone: Zone::Safe,
            warning_batches: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// `(p_min, s_min)`, once zone evaluation has started.
    pub fn minimum(&self) -> Option<(f64, f64)> {
        self.minimum
    }

    pub fn zone(&self) -> Zone {
        self.zone
    }

    /// Steps of the current warning zone, ascending.
    pub fn warning_batches(&self) -> &[usize] {
        &self.warning_batches
    }

    pub fn observe(&mut self, q: f64, step: usize) -> Result<Zone> {
        if !q.is_finite() {
            return Err(Error::NonFinite("control score"));
        }
        self.count += 1;
        let i = self.count as f64;
        self.sum += q;
        self.p = self.sum / i;
        let delta = self.p - self.p_mean;
        self.p_mean += delta / i;
        self.p_m2 += delta * (self.p - self.p_mean);
        self.s = (self.p_m2.max(0.0) / i).sqrt();

        if self.count < self.config.warmup {
            return Ok(self.zone);
        }
        let level = self.p + self.s;
        match self.minimum {
            Some((pm, sm)) if level >= pm + sm => {}
            _ => self.minimum = Some((self.p, self.s)),
        }
        let (p_min, s_min) = self.minimum.unwrap();
        let s_eff = s_min.max(self.config.eps_floor);
        if level > p_min + 3.0 * s_eff {
            self.zone = Zone::Drift;
        } else if level > p_min + 2.0 * s_eff {
            self.zone = Zone::Warning;
        } else if level < p_min + 2.0 * s_eff {
            self.zone = Zone::Safe;
            self.warning_batches.clear();
        } else if self.zone == Zone::Drift {
            // Exactly on the warning threshold: no longer past the drift one.
            self.zone = Zone::Warning;
        }
        if self.zone != Zone::Safe && self.warning_batches.last() != Some(&step) {
            self.warning_batches.push(step);
        }
        Ok(self.zone)
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.config.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerRule {
    KpiModule,
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub drift: bool,
    pub rule: Option<TriggerRule>,
    pub votes: [Zone; N_SIGNALS],
    /// Filled on drift.
    pub retrain_steps: Vec<usize>,
    /// The warning union was empty and the fallback window was used.
    pub fallback: bool,
}

/// Drift votes needed among `m` participating signals other than q1.
pub fn majority_threshold(m: usize) -> usize {
    (m + 2) / 2
}

/// Drift when q1 is in drift, or when enough of the other included signals
/// are. With all six included the majority threshold is 3 of 5.
pub fn vote(zones: &[Zone; N_SIGNALS], included: &[bool; N_SIGNALS]) -> (bool, Option<TriggerRule>) {
    if included[0] && zones[0] == Zone::Drift {
        return (true, Some(TriggerRule::KpiModule));
    }
    let m = included[1..].iter().filter(|&&b| b).count();
    if m == 0 {
        return (false, None);
    }
    let votes = (1..N_SIGNALS)
        .filter(|&j| included[j] && zones[j] == Zone::Drift)
        .count();
    if votes >= majority_threshold(m) {
        (true, Some(TriggerRule::Majority))
    } else {
        (false, None)
    }
}

/// Sorted union of the warning sets, or the last `fallback` steps up to
/// `step` when the union is empty. The flag reports the fallback.
pub fn collect_retrain_steps<'a>(
    warning_sets: impl IntoIterator<Item = &'a [usize]>,
    step: usize,
    fallback: usize,
) -> (Vec<usize>, bool) {
    let mut all: Vec<usize> = warning_sets.into_iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    if all.is_empty() {
        let start = (step + 1).saturating_sub(fallback.max(1));
        ((start..=step).collect(), true)
    } else {
        (all, false)
    }
}

/// Runs the vote over the six states and, on drift, collects the retraining
/// steps.
pub fn decide(
    states: &[ControlState; N_SIGNALS],
    included: &[bool; N_SIGNALS],
    step: usize,
    fallback: usize,
) -> EnsembleDecision {
    let votes: [Zone; N_SIGNALS] = std::array::from_fn(|j| states[j].zone());
    let (drift, rule) = vote(&votes, included);
    let (retrain_steps, fallback) = if drift {
        collect_retrain_steps(
            (0..N_SIGNALS)
                .filter(|&j| included[j])
                .map(|j| states[j].warning_batches()),
            step,
            fallback,
        )
    } else {
        (Vec::new(), false)
    };
    EnsembleDecision {
        drift,
        rule,
        votes,
        retrain_steps,
        fallback,
    }
}

/// One row of the zone log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRecord {
    pub step: usize,
    pub signal: String,
    pub zone: Zone,
    pub p: f64,
    pub s: f64,
    pub p_min: Option<f64>,
    pub s_min: Option<f64>,
}

impl ZoneRecord {
    pub fn of(state: &ControlState, step: usize, signal: &str) -> Self {
        Self {
            step,
            signal: signal.to_string(),
            zone: state.zone(),
            p: state.p(),
            s: state.s(),
            p_min: state.minimum().map(|m| m.0),
            s_min: state.minimum().map(|m| m.1),
        }
    }
}

pub fn write_zone_csv<W: Write>(out: W, records: &[ZoneRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
