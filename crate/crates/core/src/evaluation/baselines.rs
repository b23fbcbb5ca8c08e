//! Single-signal detectors run on the delayed-KPI series.

use serde::{Deserialize, Serialize};

use crate::control::Zone;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ddm,
    Ph,
    Ewma,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Ddm => "ddm",
            BaselineKind::Ph => "ph",
            BaselineKind::Ewma => "ewma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdmParams {
    pub warning: f64,
    pub drift: f64,
    /// Observations before zones are evaluated.
    pub min_observations: usize,
}

impl Default for DdmParams {
    fn default() -> Self {
        Self {
            warning: 2.0,
            drift: 3.0,
            min_observations: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhParams {
    pub delta: f64,
    /// Alarm threshold on `m_t - M_t`. The customary 50 applies to sums of
    /// per-sample 0/1 errors; each observation here is the mean over a
    /// 64-sample batch, hence 50 / 64.
    pub lambda: f64,
    /// Fading factor on the cumulative sum.
    pub alpha: f64,
}

impl Default for PhParams {
    fn default() -> Self {
        Self {
            delta: 0.005,
            lambda: 50.0 / 64.0,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwmaParams {
    /// Weight kept on the previous estimate; the newest KPI gets
    /// `1 - decay`.
    pub decay: f64,
    pub warning: f64,
    pub drift: f64,
    pub min_observations: usize,
}

impl Default for EwmaParams {
    fn default() -> Self {
        Self {
            decay: 0.8,
            warning: 2.0,
            drift: 3.0,
            min_observations: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub ddm: DdmParams,
    pub ph: PhParams,
    pub ewma: EwmaParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum DetectorState {
    Ddm {
        params: DdmParams,
        n: usize,
        sum: f64,
        minimum: Option<(f64, f64)>,
    },
    Ph {
        params: PhParams,
        n: usize,
        mean: f64,
        m: f64,
        m_min: f64,
    },
    Ewma {
        params: EwmaParams,
        n: usize,
        mean: f64,
        m2: f64,
        estimate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDetector {
    state: DetectorState,
    initial: DetectorState,
    zone: Zone,
    warning_batches: Vec<usize>,
}

impl BaselineDetector {
    pub fn new(kind: BaselineKind, params: &BaselineParams) -> Self {
        let state = match kind {
            BaselineKind::Ddm => DetectorState::Ddm {
                params: params.ddm.clone(),
                n: 0,
                sum: 0.0,
                minimum: None,
            },
            BaselineKind::Ph => DetectorState::Ph {
                params: params.ph.clone(),
                n: 0,
                mean: 0.0,
                m: 0.0,
                m_min: 0.0,
            },
            BaselineKind::Ewma => DetectorState::Ewma {
                params: params.ewma.clone(),
                n: 0,
                mean: 0.0,
                m2: 0.0,
                estimate: 0.0,
            },
        };
        Self {
            initial: state.clone(),
            state,
            zone: Zone::Safe,
            warning_batches: Vec::new(),
        }
    }

    pub fn kind(&self) -> BaselineKind {
        match self.state {
            DetectorState::Ddm { .. } => BaselineKind::Ddm,
            DetectorState::Ph { .. } => BaselineKind::Ph,
            DetectorState::Ewma { .. } => BaselineKind::Ewma,
        }
    }

    pub fn zone(&self) -> Zone {
        self.zone
    }

    /// Warning-zone steps (DDM only; the others never warn).
    pub fn warning_batches(&self) -> &[usize] {
        &self.warning_batches
    }

    /// The current EWMA estimate, for inspection.
    pub fn estimate(&self) -> Option<f64> {
        match self.state {
            DetectorState::Ewma { estimate, n, .. } if n > 0 => Some(estimate),
            _ => None,
        }
    }

    pub fn reset(&mut self) {
        self.state = self.initial.clone();
        self.zone = Zone::Safe;
        self.warning_batches.clear();
    }

    /// Consumes one KPI value observed at `step`.
    pub fn observe(&mut self, kpi: f64, step: usize) -> Result<Zone> {
        if !(0.0..=1.0).contains(&kpi) {
            return Err(Error::OutOfRange(format!("kpi {kpi} outside [0, 1]")));
        }
        let zone = match &mut self.state {
            DetectorState::Ddm {
                params,
                n,
                sum,
                minimum,
            } => {
                *n += 1;
                *sum += kpi;
                let p = *sum / *n as f64;
                let s = (p * (1.0 - p) / *n as f64).sqrt();
                if *n < params.min_observations {
                    Zone::Safe
                } else {
                    match *minimum {
                        Some((pm, sm)) if p + s >= pm + sm => {}
                        _ => *minimum = Some((p, s)),
                    }
                    let (pm, sm) = minimum.unwrap();
                    let sm = sm.max(1e-8);
                    if p + s > pm + params.drift * sm {
                        Zone::Drift
                    } else if p + s > pm + params.warning * sm {
                        Zone::Warning
                    } else {
                        Zone::Safe
                    }
                }
            }
            DetectorState::Ph {
                params,
                n,
                mean,
                m,
                m_min,
            } => {
                *n += 1;
                *mean += (kpi - *mean) / *n as f64;
                *m = params.alpha * *m + (kpi - *mean - params.delta);
                *m_min = m_min.min(*m);
                if *m - *m_min > params.lambda {
                    Zone::Drift
                } else {
                    Zone::Safe
                }
            }
            DetectorState::Ewma {
                params,
                n,
                mean,
                m2,
                estimate,
            } => {
                *n += 1;
                let d = kpi - *mean;
                *mean += d / *n as f64;
                *m2 += d * (kpi - *mean);
                *estimate = if *n == 1 {
                    kpi
                } else {
                    params.decay * *estimate + (1.0 - params.decay) * kpi
                };
                if *n < params.min_observations {
                    Zone::Safe
                } else {
                    let lam = 1.0 - params.decay;
                    let sd = (*m2 / *n as f64).sqrt();
                    let spread = if lam >= 1.0 {
                        sd
                    } else {
                        sd * (lam / (2.0 - lam) * (1.0 - params.decay.powi(2 * *n as i32))).sqrt()
                    };
                    let spread = spread.max(1e-8);
                    if *estimate > *mean + params.drift * spread {
                        Zone::Drift
                    } else if *estimate > *mean + params.warning * spread {
                        Zone::Warning
                    } else {
                        Zone::Safe
                    }
                }
            }
        };
        self.zone = zone;
        match zone {
            Zone::Safe => self.warning_batches.clear(),
            _ if self.kind() == BaselineKind::Ddm => {
                if self.warning_batches.last() != Some(&step) {
                    self.warning_batches.push(step);
                }
            }
            _ => {}
        }
        Ok(zone)
    }
}
