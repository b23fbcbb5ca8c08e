//! Batched feature streams and lagged label delivery.
//!
//! A [`Stream`] is a finite sequence of [`Batch`]es produced by one of the
//! generators (or the CSV loader). Detectors never see a [`Batch`] directly:
//! [`LabelScheduler`] splits each batch into an [`ObservedBatch`] (features
//! only) and a [`LabelDelivery`] that is released `l` steps later.

mod csv;
mod generators;
mod lag;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use self::csv::{load_csv, LabeledPool};
pub use generators::{
    composite_fraction, generate, sea_label, sine2_label, CompositeSpec, Generator, PoolPair,
    Scenario, SyntheticPools, SEA_THRESHOLDS,
};
pub use lag::{
    expected_floored_lag, schedule_labels, LabelScheduler, LagKind, LagPolicy, StreamStep,
};

/// Features that arrived at one stream step, together with the hidden labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: usize,
    pub features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(step: usize, features: Array2<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.nrows(), labels.len(), "one label per feature row");
        Self {
            step,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Ground truth for this batch. Only warm-start code and tests read this;
    /// the serving loop receives labels through [`LabelDelivery`].
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_parts(self) -> (ObservedBatch, Vec<usize>) {
        (
            ObservedBatch {
                step: self.step,
                features: self.features,
            },
            self.labels,
        )
    }
}

/// The label-free view of a batch handed to the serving loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedBatch {
    pub step: usize,
    pub features: Array2<f64>,
}

/// Labels for the batch of step `for_step`, released at step `delivered_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDelivery {
    pub delivered_at: usize,
    pub for_step: usize,
    pub labels: Vec<usize>,
}

/// What to generate and how to cut it into batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub generator: Generator,
    /// Defaults to the generator's customary length when absent.
    #[serde(default)]
    pub total_samples: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    64
}

impl StreamSpec {
    pub fn new(generator: Generator, seed: u64) -> Self {
        Self {
            generator,
            total_samples: None,
            batch_size: default_batch_size(),
            seed,
        }
    }

    pub fn with_total_samples(mut self, total: usize) -> Self {
        self.total_samples = Some(total);
        self
    }

    pub fn total_samples(&self) -> usize {
        self.total_samples
            .unwrap_or_else(|| self.generator.default_total_samples())
    }

    /// Number of full batches; an incomplete trailing batch is dropped.
    pub fn n_batches(&self) -> usize {
        self.total_samples() / self.batch_size
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size == 0 {
            return Err(crate::Error::InvalidSpec("batch_size must be positive".into()));
        }
        if self.total_samples() == 0 {
            return Err(crate::Error::InvalidSpec(
                "total_samples must be positive".into(),
            ));
        }
        self.generator.validate()
    }
}

/// A fully materialised stream.
#[derive(Debug, Clone)]
pub struct Stream {
    pub batches: Vec<Batch>,
    /// Step indices where ground-truth drift begins; empty for real data.
    pub drift_truth: Vec<usize>,
    pub n_classes: usize,
    pub dim: usize,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}
