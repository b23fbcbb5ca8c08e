use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::csv::{load_csv, LabeledPool};
use super::{Batch, Stream, StreamSpec};
use crate::{Error, Result};

/// Classic SEA concept thresholds on `f1 + f2`.
pub const SEA_THRESHOLDS: [f64; 4] = [8.0, 9.0, 7.0, 9.5];
const SEA_CONCEPT_LEN: usize = 12_500;
const SINE2_CONCEPT_LEN: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Sea,
    Sine2,
    StationaryGaussian {
        #[serde(default = "default_gauss_dim")]
        dim: usize,
        #[serde(default = "default_gauss_classes")]
        classes: usize,
        /// Distance between consecutive class means, in units of the
        /// (unit) within-class standard deviation.
        #[serde(default = "default_gauss_separation")]
        separation: f64,
    },
    Composite(CompositeSpec),
    Csv { path: PathBuf },
}

fn default_gauss_dim() -> usize {
    4
}
fn default_gauss_classes() -> usize {
    2
}
fn default_gauss_separation() -> f64 {
    3.0
}

impl Generator {
    pub fn stationary_gaussian() -> Self {
        Generator::StationaryGaussian {
            dim: default_gauss_dim(),
            classes: default_gauss_classes(),
            separation: default_gauss_separation(),
        }
    }

    pub fn default_total_samples(&self) -> usize {
        match self {
            Generator::Sea => 50_000,
            Generator::Sine2 => 100_000,
            Generator::StationaryGaussian { .. } => 500 * 64,
            Generator::Composite(_) => 60_000,
            // Whole file.
            Generator::Csv { .. } => usize::MAX,
        }
    }

    /// Whether the detectors should look at encoder embeddings rather than
    /// raw features.
    pub fn is_unstructured(&self) -> bool {
        matches!(self, Generator::Composite(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Generator::Sea => "sea",
            Generator::Sine2 => "sine2",
            Generator::StationaryGaussian { .. } => "stationary-gaussian",
            Generator::Composite(_) => "composite",
            Generator::Csv { .. } => "csv",
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Generator::StationaryGaussian { dim, classes, .. } if *dim == 0 || *classes < 2 => {
                Err(Error::InvalidSpec(
                    "stationary gaussian needs dim >= 1 and classes >= 2".into(),
                ))
            }
            Generator::Composite(c) => c.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Sudden,
    SuddenGradual,
    GradIncrease,
    GradPlateau,
    GradDecrease,
}

impl Scenario {
    pub fn is_sudden(self) -> bool {
        matches!(self, Scenario::Sudden | Scenario::SuddenGradual)
    }
}

/// Where the base and drift sample pools come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolPair {
    Synthetic(SyntheticPools),
    Csv { base: PathBuf, drift: PathBuf },
}

/// Two Gaussian class-cluster pools. The drift pool is displaced by a common
/// domain offset and rescaled, and by default draws its own class means so a
/// classifier fitted on the base pool does not transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPools {
    #[serde(default = "default_pool_dim")]
    pub dim: usize,
    #[serde(default = "default_pool_classes")]
    pub classes: usize,
    #[serde(default = "default_pool_per_class")]
    pub per_class: usize,
    /// Standard deviation of the class means around the origin.
    #[serde(default = "default_pool_mean_spread")]
    pub mean_spread: f64,
    /// Norm of the offset between the base and drift domains.
    #[serde(default = "default_pool_domain_shift")]
    pub domain_shift: f64,
    /// Within-class standard deviation multiplier of the drift domain.
    #[serde(default = "default_pool_drift_scale")]
    pub drift_scale: f64,
    /// Reuse the base class means in the drift pool.
    #[serde(default)]
    pub shared_means: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool_dim() -> usize {
    20
}
fn default_pool_classes() -> usize {
    10
}
fn default_pool_per_class() -> usize {
    600
}
fn default_pool_mean_spread() -> f64 {
    1.5
}
fn default_pool_domain_shift() -> f64 {
    4.0
}
fn default_pool_drift_scale() -> f64 {
    1.2
}

impl Default for SyntheticPools {
    fn default() -> Self {
        Self {
            dim: default_pool_dim(),
            classes: default_pool_classes(),
            per_class: default_pool_per_class(),
            mean_spread: default_pool_mean_spread(),
            domain_shift: default_pool_domain_shift(),
            drift_scale: default_pool_drift_scale(),
            shared_means: false,
            seed: 0,
        }
    }
}

impl SyntheticPools {
    pub fn generate(&self) -> (LabeledPool, LabeledPool) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_9001);
        let class_means = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((self.classes, self.dim), |_| {
                self.mean_spread * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let means = class_means(&mut rng);
        let drift_means = if self.shared_means {
            means.clone()
        } else {
            class_means(&mut rng)
        };
        let direction = Array1::from_shape_fn(self.dim, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = direction.dot(&direction).sqrt().max(1e-12);
        let offset = direction * (self.domain_shift / norm);

        let mut draw = |means: &Array2<f64>, shift: Option<&Array1<f64>>, scale: f64| {
            let n = self.classes * self.per_class;
            let mut features = Array2::zeros((n, self.dim));
            let mut labels = Vec::with_capacity(n);
            for c in 0..self.classes {
                for k in 0..self.per_class {
                    let mut row = features.row_mut(c * self.per_class + k);
                    for f in 0..self.dim {
                        let noise: f64 = rng.sample(StandardNormal);
                        row[f] = means[[c, f]] + scale * noise + shift.map_or(0.0, |s| s[f]);
                    }
                    labels.push(c);
                }
            }
            LabeledPool::new(features, labels, self.classes)
        };
        let base = draw(&means, None, 1.0);
        let drift = draw(&drift_means, Some(&offset), self.drift_scale);
        (base, drift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeSpec {
    pub pools: PoolPair,
    pub scenario: Scenario,
    /// Share of each batch drawn from the drift pool at full injection.
    #[serde(default = "default_peak_fraction")]
    pub peak_fraction: f64,
    /// Batches between sudden injections; gradual ramps also start here.
    #[serde(default = "default_period")]
    pub period: usize,
    /// Batch where plateau/decrease scenarios stop growing.
    #[serde(default = "default_turn")]
    pub turn: usize,
}

fn default_peak_fraction() -> f64 {
    0.5
}
fn default_period() -> usize {
    100
}
fn default_turn() -> usize {
    500
}

impl CompositeSpec {
    pub fn synthetic(scenario: Scenario, pools: SyntheticPools) -> Self {
        Self {
            pools: PoolPair::Synthetic(pools),
            scenario,
            peak_fraction: default_peak_fraction(),
            period: default_period(),
            turn: default_turn(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.peak_fraction) {
            return Err(Error::InvalidSpec("peak_fraction must lie in [0, 1]".into()));
        }
        if self.period == 0 || self.turn <= self.period {
            return Err(Error::InvalidSpec(
                "composite needs period >= 1 and turn > period".into(),
            ));
        }
        Ok(())
    }
}

/// Drift-pool share of batch `b` and the drift classes eligible at `b`.
///
/// Sudden scenarios inject exactly one drift class per window of `period`
/// batches, rotating through the classes. Gradual scenarios inject all
/// classes with a share that ramps from zero at batch `period`.
pub fn composite_fraction(
    spec: &CompositeSpec,
    b: usize,
    n_batches: usize,
    n_classes: usize,
) -> (f64, Vec<usize>) {
    let peak = spec.peak_fraction;
    let p = spec.period;
    let all: Vec<usize> = (0..n_classes).collect();
    if b < p {
        return (0.0, Vec::new());
    }
    let window = b / p;
    let one = vec![(window - 1) % n_classes];
    match spec.scenario {
        Scenario::Sudden => (peak, one),
        Scenario::SuddenGradual => {
            let into = (b - window * p + 1) as f64 / p as f64;
            (peak * into, one)
        }
        Scenario::GradIncrease => {
            let span = n_batches.saturating_sub(1).saturating_sub(p).max(1) as f64;
            (peak * ((b - p) as f64 / span).min(1.0), all)
        }
        Scenario::GradPlateau => {
            let span = (spec.turn - p) as f64;
            (peak * ((b - p) as f64 / span).min(1.0), all)
        }
        Scenario::GradDecrease => {
            let span = (spec.turn - p) as f64;
            let f = if b <= spec.turn {
                (b - p) as f64 / span
            } else {
                1.0 - (b - spec.turn) as f64 / span
            };
            (peak * f.clamp(0.0, 1.0), all)
        }
    }
}

/// SEA concept: class 1 iff `f1 + f2 <= theta`.
pub fn sea_label(features: &[f64], theta: f64) -> usize {
    usize::from(features[0] + features[1] <= theta)
}

/// Sine2 concept: class 1 below the sinusoid for even concepts, inverted for
/// odd ones.
pub fn sine2_label(features: &[f64], concept: usize) -> usize {
    let below = features[1] < 0.5 + 0.3 * (3.0 * std::f64::consts::PI * features[0]).sin();
    usize::from(below ^ (concept % 2 == 1))
}

pub fn generate(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bs = spec.batch_size;
    match &spec.generator {
        Generator::Sea => {
            let n = spec.n_batches();
            let batches = (0..n)
                .map(|b| {
                    let features = Array2::from_shape_fn((bs, 3), |_| rng.random_range(0.0..10.0));
                    let labels = (0..bs)
                        .map(|r| {
                            let concept = ((b * bs + r) / SEA_CONCEPT_LEN).min(3);
                            sea_label(features.row(r).as_slice().unwrap(), SEA_THRESHOLDS[concept])
                        })
                        .collect();
                    Batch::new(b, features, labels)
                })
                .collect();
            Ok(Stream {
                batches,
                drift_truth: concept_starts(spec.total_samples(), SEA_CONCEPT_LEN, bs, 3),
                n_classes: 2,
                dim: 3,
            })
        }
        Generator::Sine2 => {
            let n = spec.n_batches();
            let batches = (0..n)
                .map(|b| {
                    let features = Array2::from_shape_fn((bs, 2), |_| rng.random_range(0.0..1.0));
                    let labels = (0..bs)
                        .map(|r| {
                            let concept = (b * bs + r) / SINE2_CONCEPT_LEN;
                            sine2_label(features.row(r).as_slice().unwrap(), concept)
                        })
                        .collect();
                    Batch::new(b, features, labels)
                })
                .collect();
            Ok(Stream {
                batches,
                drift_truth: concept_starts(spec.total_samples(), SINE2_CONCEPT_LEN, bs, 9),
                n_classes: 2,
                dim: 2,
            })
        }
        Generator::StationaryGaussian {
            dim,
            classes,
            separation,
        } => {
            let (dim, classes) = (*dim, *classes);
            let mut direction =
                Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = direction.dot(&direction).sqrt().max(1e-12);
            direction /= norm;
            let n = spec.n_batches();
            let batches = (0..n)
                .map(|b| {
                    let labels: Vec<usize> =
                        (0..bs).map(|_| rng.random_range(0..classes)).collect();
                    let mut features = Array2::zeros((bs, dim));
                    for (r, &c) in labels.iter().enumerate() {
                        for f in 0..dim {
                            let noise: f64 = rng.sample(StandardNormal);
                            features[[r, f]] = c as f64 * separation * direction[f] + noise;
                        }
                    }
                    Batch::new(b, features, labels)
                })
                .collect();
            Ok(Stream {
                batches,
                drift_truth: Vec::new(),
                n_classes: classes,
                dim,
            })
        }
        Generator::Composite(c) => generate_composite(spec, c, &mut rng),
        Generator::Csv { path } => {
            let pool = load_csv(path)?;
            let total = spec.total_samples().min(pool.len());
            let n = total / bs;
            let batches = (0..n)
                .map(|b| {
                    let rows = b * bs..(b + 1) * bs;
                    let features = pool.features.slice(ndarray::s![rows.clone(), ..]).to_owned();
                    Batch::new(b, features, pool.labels[rows].to_vec())
                })
                .collect();
            Ok(Stream {
                batches,
                drift_truth: Vec::new(),
                n_classes: pool.n_classes,
                dim: pool.dim(),
            })
        }
    }
}

/// Batch indices of the first sample of concepts `1..=count`.
fn concept_starts(total: usize, concept_len: usize, batch: usize, count: usize) -> Vec<usize> {
    let n_batches = total / batch;
    (1..=count)
        .map(|k| k * concept_len / batch)
        .filter(|&b| b < n_batches)
        .collect()
}

fn generate_composite(spec: &StreamSpec, c: &CompositeSpec, rng: &mut ChaCha8Rng) -> Result<Stream> {
    let (base, drift) = match &c.pools {
        PoolPair::Synthetic(s) => s.generate(),
        PoolPair::Csv { base, drift } => (load_csv(base)?, load_csv(drift)?),
    };
    if base.dim() != drift.dim() {
        return Err(Error::SourceMismatch(format!(
            "feature dimension {} vs {}",
            base.dim(),
            drift.dim()
        )));
    }
    if base.class_names != drift.class_names {
        return Err(Error::SourceMismatch(format!(
            "label sets {:?} vs {:?}",
            base.class_names, drift.class_names
        )));
    }
    let n_classes = base.n_classes;
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|k| (0..drift.len()).filter(|&i| drift.labels[i] == k).collect())
        .collect();
    let bs = spec.batch_size;
    let n = spec.n_batches();
    let dim = base.dim();
    let mut batches = Vec::with_capacity(n);
    for b in 0..n {
        let (fraction, classes) = composite_fraction(c, b, n, n_classes);
        let classes: Vec<usize> = classes
            .into_iter()
            .filter(|&k| !by_class[k].is_empty())
            .collect();
        let n_drift = if classes.is_empty() {
            0
        } else {
            (fraction * bs as f64).round() as usize
        };
        let mut rows: Vec<(bool, usize)> = Vec::with_capacity(bs);
        for _ in 0..n_drift {
            let k = classes[rng.random_range(0..classes.len())];
            let pick = &by_class[k];
            rows.push((true, pick[rng.random_range(0..pick.len())]));
        }
        for _ in n_drift..bs {
            rows.push((false, rng.random_range(0..base.len())));
        }
        rows.shuffle(rng);
        let mut features = Array2::zeros((bs, dim));
        let mut labels = Vec::with_capacity(bs);
        for (r, (from_drift, i)) in rows.into_iter().enumerate() {
            let pool = if from_drift { &drift } else { &base };
            features.row_mut(r).assign(&pool.features.row(i));
            labels.push(pool.labels[i]);
        }
        batches.push(Batch::new(b, features, labels));
    }
    let drift_truth = if c.scenario.is_sudden() {
        (1..).map(|k| k * c.period).take_while(|&s| s < n).collect()
    } else {
        Vec::new()
    };
    Ok(Stream {
        batches,
        drift_truth,
        n_classes,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sea_drift_truth() {
        let s = generate(&StreamSpec::new(Generator::Sea, 1)).unwrap();
        assert_eq!(s.drift_truth, vec![195, 390, 585]);
        assert_eq!(s.len(), 781);
    }

    #[test]
    fn sea_label_examples() {
        assert_eq!(sea_label(&[0.0, 0.0, 5.0], 8.0), 1);
        assert_eq!(sea_label(&[5.0, 4.0, 0.0], 8.0), 0);
    }

    #[test]
    fn sine2_label_examples() {
        assert_eq!(sine2_label(&[0.0, 0.4], 0), 1);
        assert_eq!(sine2_label(&[0.0, 0.4], 1), 0);
    }

    #[test]
    fn sine2_shape() {
        let s = generate(&StreamSpec::new(Generator::Sine2, 1)).unwrap();
        assert_eq!(s.len(), 1562);
        assert_eq!(s.drift_truth.len(), 9);
        assert_eq!(s.drift_truth[0], 156);
    }

    #[test]
    fn labels_are_pure_functions_of_features() {
        let s = generate(&StreamSpec::new(Generator::Sea, 4)).unwrap();
        for b in &s.batches {
            for r in 0..b.len() {
                let concept = ((b.step * 64 + r) / SEA_CONCEPT_LEN).min(3);
                let row = b.features.row(r).to_vec();
                assert_eq!(sea_label(&row, SEA_THRESHOLDS[concept]), b.labels()[r]);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = StreamSpec::new(Generator::Sine2, 9).with_total_samples(6400);
        assert_eq!(generate(&spec).unwrap().batches, generate(&spec).unwrap().batches);
    }

    fn sudden() -> CompositeSpec {
        CompositeSpec::synthetic(Scenario::Sudden, SyntheticPools::default())
    }

    #[test]
    fn sudden_schedule() {
        let c = sudden();
        assert_eq!(composite_fraction(&c, 50, 937, 10).0, 0.0);
        let (f, classes) = composite_fraction(&c, 150, 937, 10);
        assert_eq!(f, 0.5);
        assert_eq!(classes, vec![0]);
        assert_eq!(composite_fraction(&c, 250, 937, 10).1, vec![1]);
    }

    #[test]
    fn grad_decrease_reaches_zero() {
        let mut c = sudden();
        c.scenario = Scenario::GradDecrease;
        assert_eq!(composite_fraction(&c, 936, 937, 10).0, 0.0);
        assert!((composite_fraction(&c, 500, 937, 10).0 - 0.5).abs() < 1e-12);
        assert!((composite_fraction(&c, 300, 937, 10).0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn composite_drift_truth_and_mix() {
        let spec = StreamSpec::new(Generator::Composite(sudden()), 2);
        let s = generate(&spec).unwrap();
        assert_eq!(s.len(), 937);
        assert_eq!(s.drift_truth, (1..=9).map(|k| k * 100).collect::<Vec<_>>());
        assert_eq!(s.dim, 20);
        assert_eq!(s.n_classes, 10);
    }

    #[test]
    fn composite_rejects_mismatched_pools() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "x,y,label\n1,2,0\n3,4,1\n").unwrap();
        std::fs::write(&b, "x,label\n1,0\n3,1\n").unwrap();
        let mut c = sudden();
        c.pools = PoolPair::Csv { base: a, drift: b };
        let err = generate(&StreamSpec::new(Generator::Composite(c), 0)).unwrap_err();
        assert!(matches!(err, Error::SourceMismatch(_)));
    }
}
