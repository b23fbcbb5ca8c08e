use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Batch, LabelDelivery, ObservedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagKind {
    /// `max(1, floor(X))` with `X ~ Exp(mean = scale)`, sampled per batch.
    Exponential { scale: f64 },
    Fixed { lag: usize },
}

// `deny_unknown_fields` does not combine with `flatten`; `LagKind` rejects
// stray keys instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagPolicy {
    #[serde(flatten)]
    pub kind: LagKind,
    #[serde(default)]
    pub seed: u64,
}

impl LagPolicy {
    pub fn exponential(scale: f64, seed: u64) -> Self {
        Self {
            kind: LagKind::Exponential { scale },
            seed,
        }
    }

    pub fn fixed(lag: usize) -> Self {
        Self {
            kind: LagKind::Fixed { lag },
            seed: 0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        match self.kind {
            LagKind::Exponential { scale } if !(scale > 0.0 && scale.is_finite()) => Err(
                crate::Error::Config(format!("lag scale must be positive, got {scale}")),
            ),
            LagKind::Fixed { lag: 0 } => {
                Err(crate::Error::Config("fixed lag must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            LagKind::Exponential { scale } => format!("exp({scale})"),
            LagKind::Fixed { lag } => format!("fixed({lag})"),
        }
    }
}

/// Mean of `max(1, floor(X))` for `X ~ Exp(mean = scale)`, by summing the
/// geometric tail `P(X >= k) = exp(-k / scale)`.
pub fn expected_floored_lag(scale: f64) -> f64 {
    let q = (-1.0 / scale).exp();
    // E[floor X] = sum_{k>=1} q^k; the clamp lifts the floor(X) = 0 mass to 1.
    q / (1.0 - q) + (1.0 - q)
}

/// One stream step as seen by the serving loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep {
    pub batch: ObservedBatch,
    /// Deliveries released at this step, sorted by `for_step`.
    pub deliveries: Vec<LabelDelivery>,
}

enum Sampler {
    Exponential { rng: ChaCha8Rng, dist: Exp<f64> },
    Fixed(usize),
}

impl Sampler {
    fn sample(&mut self) -> usize {
        match self {
            Sampler::Exponential { rng, dist } => (dist.sample(rng).floor() as usize).max(1),
            Sampler::Fixed(l) => *l,
        }
    }
}

/// Interleaves batches with their lagged label deliveries.
///
/// Lags are sampled once per batch at emission time, so deliveries for
/// different batches may arrive out of order.
pub struct LabelScheduler<I> {
    batches: I,
    sampler: Sampler,
    pending: BTreeMap<usize, Vec<LabelDelivery>>,
}

impl<I: Iterator<Item = Batch>> LabelScheduler<I> {
    pub fn new(batches: impl IntoIterator<IntoIter = I>, policy: &LagPolicy) -> Self {
        let sampler = match policy.kind {
            LagKind::Exponential { scale } => Sampler::Exponential {
                rng: ChaCha8Rng::seed_from_u64(policy.seed),
                dist: Exp::new(1.0 / scale).expect("positive lag scale"),
            },
            LagKind::Fixed { lag } => Sampler::Fixed(lag.max(1)),
        };
        Self {
            batches: batches.into_iter(),
            sampler,
            pending: BTreeMap::new(),
        }
    }

    /// Deliveries scheduled past the last emitted step.
    pub fn undelivered(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }
}

impl<I: Iterator<Item = Batch>> Iterator for LabelScheduler<I> {
    type Item = StreamStep;

    fn next(&mut self) -> Option<StreamStep> {
        let batch = self.batches.next()?;
        let step = batch.step;
        let lag = self.sampler.sample();
        let (observed, labels) = batch.into_parts();
        self.pending
            .entry(step + lag)
            .or_default()
            .push(LabelDelivery {
                delivered_at: step + lag,
                for_step: step,
                labels,
            });
        let mut deliveries = self.pending.remove(&step).unwrap_or_default();
        deliveries.sort_by_key(|d| d.for_step);
        Some(StreamStep {
            batch: observed,
            deliveries,
        })
    }
}

pub fn schedule_labels<I: IntoIterator<Item = Batch>>(
    batches: I,
    policy: &LagPolicy,
) -> LabelScheduler<I::IntoIter> {
    LabelScheduler::new(batches, policy)
}
