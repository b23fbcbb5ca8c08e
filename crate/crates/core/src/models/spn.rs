//! Sum-product network density estimator.
//!
//! Structure, bottom-up: univariate normal leaves, a product over the
//! features of a group for each mixture component, a weighted sum over
//! components, and a product over groups at the root.
//!
//! Features are normalised with the training mean and standard deviation
//! before reaching the leaves and the density is defined on that normalised
//! space. Columns that are constant in the training data carry no density
//! information and are left out.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{for_each_minibatch, select_rows, Adam, Standardizer, TrainConfig};
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpnConfig {
    pub groups: usize,
    pub components: usize,
    pub sigma_floor: f64,
}

impl Default for SpnConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            components: 5,
            sigma_floor: 1e-3,
        }
    }
}

/// One sum node over `components` product nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnGroup {
    /// Positions in the model's active-feature vector.
    pub features: Vec<usize>,
    /// `components x |features|`.
    pub means: Array2<f64>,
    /// Leaf stdev is `exp(log_scales) + sigma_floor`.
    pub log_scales: Array2<f64>,
    /// Mixture logits; weights are their softmax.
    pub logits: Array1<f64>,
}

impl SpnGroup {
    /// Group with explicit leaf stdevs (each `> sigma_floor`) and mixture
    /// weights. Zero weights are allowed.
    pub fn from_params(
        features: Vec<usize>,
        means: Array2<f64>,
        stdevs: &Array2<f64>,
        weights: &Array1<f64>,
        sigma_floor: f64,
    ) -> Self {
        assert!(stdevs.iter().all(|&s| s > sigma_floor));
        Self {
            features,
            means,
            log_scales: stdevs.mapv(|s| (s - sigma_floor).ln()),
            logits: weights.mapv(f64::ln),
        }
    }

    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn log_weights(&self) -> Array1<f64> {
        let lse = log_sum_exp(self.logits.iter().copied());
        self.logits.mapv(|l| l - lse)
    }

    pub fn weights(&self) -> Array1<f64> {
        self.log_weights().mapv(f64::exp)
    }
}

/// Gradient of the mean log-likelihood for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SpnGroupGrad {
    pub means: Array2<f64>,
    pub log_scales: Array2<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnModel {
    pub input: Standardizer,
    /// Indices of the raw features that feed the leaves.
    pub active: Vec<usize>,
    pub groups: Vec<SpnGroup>,
    pub sigma_floor: f64,
}

struct Leaves {
    sigma: Array2<f64>,
    inv_sigma: Array2<f64>,
    offset: Array1<f64>,
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl SpnModel {
    pub fn input_dim(&self) -> usize {
        self.input.dim()
    }

    fn check_dim(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn normalise(&self, x: &Array2<f64>) -> Array2<f64> {
        self.input.apply(x).select(Axis(1), &self.active)
    }

    fn leaves(&self, g: &SpnGroup) -> Leaves {
        let sigma = g.log_scales.mapv(|r| r.exp() + self.sigma_floor);
        let log_w = g.log_weights();
        // Leaf normalisers folded into one constant per component.
        let offset = Array1::from_shape_fn(g.n_components(), |c| {
            log_w[c] - sigma.row(c).iter().map(|s| s.ln() + HALF_LN_2PI).sum::<f64>()
        });
        Leaves {
            inv_sigma: sigma.mapv(|s| 1.0 / s),
            sigma,
            offset,
        }
    }

    /// `log w_c + sum_f log N(z_f | mu, sigma)` for every component, with
    /// `zg` the row restricted to the group's features.
    fn component_log_joint(g: &SpnGroup, leaves: &Leaves, zg: &[f64], out: &mut [f64]) {
        for c in 0..g.n_components() {
            let means = g.means.row(c);
            let inv = leaves.inv_sigma.row(c);
            let quad: f64 = zg
                .iter()
                .zip(means.as_slice().unwrap())
                .zip(inv.as_slice().unwrap())
                .map(|((z, m), i)| {
                    let u = (z - m) * i;
                    u * u
                })
                .sum();
            out[c] = leaves.offset[c] - 0.5 * quad;
        }
    }

    /// Per-sample log-density.
    pub fn log_density(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let z = self.normalise(x);
        let mut out = Array1::zeros(x.nrows());
        let leaves: Vec<Leaves> = self.groups.iter().map(|g| self.leaves(g)).collect();
        let mut buf = Vec::new();
        let mut zg = Vec::new();
        for (r, row) in z.rows().into_iter().enumerate() {
            let mut total = 0.0;
            for (g, lv) in self.groups.iter().zip(&leaves) {
                buf.resize(g.n_components(), 0.0);
                zg.clear();
                zg.extend(g.features.iter().map(|&f| row[f]));
                Self::component_log_joint(g, lv, &zg, &mut buf);
                total += log_sum_exp(buf.iter().copied());
            }
            out[r] = total;
        }
        Ok(out)
    }

    /// Posterior component probabilities for one group (rows = samples).
    pub fn responsibilities(&self, group: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let g = &self.groups[group];
        let z = self.normalise(x);
        let mut out = Array2::zeros((x.nrows(), g.n_components()));
        let lv = self.leaves(g);
        let mut buf = vec![0.0; g.n_components()];
        for (r, row) in z.rows().into_iter().enumerate() {
            let zg: Vec<f64> = g.features.iter().map(|&f| row[f]).collect();
            Self::component_log_joint(g, &lv, &zg, &mut buf);
            let lse = log_sum_exp(buf.iter().copied());
            for c in 0..buf.len() {
                out[[r, c]] = (buf[c] - lse).exp();
            }
        }
        Ok(out)
    }

    /// Mean log-likelihood of raw rows `x` and its gradient w.r.t. every
    /// group's `(means, log_scales, logits)`.
    pub fn loglik_grad(&self, x: &Array2<f64>) -> Result<(f64, Vec<SpnGroupGrad>)> {
        self.check_dim(x)?;
        let (ll, grads) = self.loglik_grad_normalised(&self.normalise(x));
        Ok((
            ll,
            grads
                .into_iter()
                .map(|(means, log_scales, logits)| SpnGroupGrad {
                    means,
                    log_scales,
                    logits,
                })
                .collect(),
        ))
    }

    fn loglik_grad_normalised(
        &self,
        z: &Array2<f64>,
    ) -> (f64, Vec<(Array2<f64>, Array2<f64>, Array1<f64>)>) {
        let n = z.nrows() as f64;
        let mut total = 0.0;
        let mut grads: Vec<_> = self
            .groups
            .iter()
            .map(|g| {
                (
                    Array2::zeros(g.means.dim()),
                    Array2::zeros(g.log_scales.dim()),
                    Array1::zeros(g.n_components()),
                )
            })
            .collect();
        let leaves: Vec<Leaves> = self.groups.iter().map(|g| self.leaves(g)).collect();
        let weights: Vec<Array1<f64>> = self.groups.iter().map(SpnGroup::weights).collect();
        let mut buf = Vec::new();
        let mut zg = Vec::new();
        for row in z.rows() {
            for (gi, g) in self.groups.iter().enumerate() {
                let lv = &leaves[gi];
                let k = g.n_components();
                buf.resize(k, 0.0);
                zg.clear();
                zg.extend(g.features.iter().map(|&f| row[f]));
                Self::component_log_joint(g, lv, &zg, &mut buf);
                let lse = log_sum_exp(buf.iter().copied());
                total += lse;
                let weights = &weights[gi];
                let (dm, ds, dl) = &mut grads[gi];
                for c in 0..k {
                    let resp = (buf[c] - lse).exp();
                    dl[c] += resp - weights[c];
                    if resp == 0.0 {
                        continue;
                    }
                    let means = g.means.row(c);
                    let inv = lv.inv_sigma.row(c);
                    let sigma = lv.sigma.row(c);
                    let mut dm_row = dm.row_mut(c);
                    let mut ds_row = ds.row_mut(c);
                    let cols = zg
                        .iter()
                        .zip(means.as_slice().unwrap())
                        .zip(inv.as_slice().unwrap())
                        .zip(sigma.as_slice().unwrap())
                        .zip(dm_row.as_slice_mut().unwrap())
                        .zip(ds_row.as_slice_mut().unwrap());
                    for (((((z, m), i), sg), gm), gs) in cols {
                        let u = (z - m) * i;
                        // d/d log_scale through sigma = exp(log_scale) + floor.
                        *gm += resp * u * i;
                        *gs += resp * (u * u - 1.0) * i * (sg - self.sigma_floor);
                    }
                }
            }
        }
        for (dm, ds, dl) in &mut grads {
            *dm /= n;
            *ds /= n;
            *dl /= n;
        }
        (total / n, grads)
    }
}

/// Mean log-likelihood `ll` of `x` under `model`, computed in the log
/// domain.
pub fn spn_loglik(model: &SpnModel, x: &Array2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("likelihood batch"));
    }
    Ok(model.log_density(x)?.mean().unwrap())
}

/// Untrained model: normaliser fitted to `x`, leaf means seeded by
/// k-means++ sampling, unit leaf stdevs, uniform mixture weights.
pub fn init_spn(x: &Array2<f64>, cfg: &SpnConfig, seed: u64) -> SpnModel {
    let input = Standardizer::fit(x);
    let std = x.std_axis(Axis(0), 0.0);
    let active: Vec<usize> = (0..x.ncols()).filter(|&f| std[f] > 1e-9).collect();
    let z = input.apply(x).select(Axis(1), &active);
    let n_groups = cfg.groups.clamp(1, active.len().max(1));
    let block = active.len().div_ceil(n_groups).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = (1.0 - cfg.sigma_floor).ln();
    let groups = (0..active.len())
        .step_by(block)
        .map(|start| {
            let features: Vec<usize> = (start..(start + block).min(active.len())).collect();
            let sub = z.select(Axis(1), &features);
            let means = kmeans_pp(&sub, cfg.components, &mut rng);
            SpnGroup {
                log_scales: Array2::from_elem(means.dim(), unit),
                logits: Array1::zeros(cfg.components),
                features,
                means,
            }
        })
        .collect();
    SpnModel {
        input,
        active,
        groups,
        sigma_floor: cfg.sigma_floor,
    }
}

fn kmeans_pp(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centres = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centres.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| (&r - &centres.row(0)).mapv(|v| v * v).sum())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            let d = (&r - &centres.row(c)).mapv(|v| v * v).sum();
            d2[i] = d2[i].min(d);
        }
    }
    centres
}

/// Fits the leaf parameters and mixture weights by gradient ascent (Adam) on
/// the mean log-likelihood.
pub fn train_spn(x: &Array2<f64>, cfg: &SpnConfig, train: &TrainConfig) -> Result<SpnModel> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("SPN training set"));
    }
    if x.nrows() < cfg.components {
        return Err(Error::OutOfRange(format!(
            "{} samples for {} components",
            x.nrows(),
            cfg.components
        )));
    }
    let mut model = init_spn(x, cfg, train.seed);
    let z = model.normalise(x);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut adam = Adam::new(train.learning_rate);
    for_each_minibatch(z.nrows(), train, &mut rng, |idx, step| {
        let zb = select_rows(&z, idx);
        let (ll, grads) = model.loglik_grad_normalised(&zb);
        if !ll.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        // Ascent: hand Adam the negated gradient.
        let neg: Vec<_> = grads
            .into_iter()
            .flat_map(|(m, s, l)| {
                [
                    m.iter().map(|v| -v).collect::<Vec<f64>>(),
                    s.iter().map(|v| -v).collect(),
                    l.iter().map(|v| -v).collect(),
                ]
            })
            .collect();
        let params: Vec<&mut [f64]> = model
            .groups
            .iter_mut()
            .flat_map(|g| {
                [
                    g.means.as_slice_mut().unwrap(),
                    g.log_scales.as_slice_mut().unwrap(),
                    g.logits.as_slice_mut().unwrap(),
                ]
            })
            .collect();
        adam.step(params, neg.iter().map(Vec::as_slice).collect());
        Ok(())
    })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn single_leaf(mean: f64, std: f64) -> SpnModel {
        SpnModel {
            input: Standardizer::identity(1),
            active: vec![0],
            groups: vec![SpnGroup::from_params(
                vec![0],
                array![[mean]],
                &array![[std]],
                &array![1.0],
                1e-3,
            )],
            sigma_floor: 1e-3,
        }
    }

    #[test]
    fn standard_normal_at_zero() {
        let ll = spn_loglik(&single_leaf(0.0, 1.0), &array![[0.0]]).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixture_equals_first_component() {
        let mut model = single_leaf(0.0, 1.0);
        model.groups[0] = SpnGroup::from_params(
            vec![0],
            array![[0.5], [3.0]],
            &array![[0.7], [2.0]],
            &array![1.0, 0.0],
            1e-3,
        );
        let x = array![[0.1], [2.0]];
        let ll = spn_loglik(&model, &x).unwrap();
        let first = spn_loglik(&single_leaf(0.5, 0.7), &x).unwrap();
        assert!((ll - first).abs() < 1e-12);
    }

    #[test]
    fn fits_gaussian_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((1000, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let cfg = SpnConfig {
            groups: 1,
            components: 1,
            sigma_floor: 1e-3,
        };
        let model = train_spn(&x, &cfg, &TrainConfig::default()).unwrap();
        // Closed-form MLE: sample mean and population stdev.
        let mean = x.mean().unwrap();
        let std = x.std(0.0);
        let g = &model.groups[0];
        let fitted_mean = g.means[[0, 0]] * model.input.scale[0] + model.input.shift[0];
        let fitted_std = (g.log_scales[[0, 0]].exp() + 1e-3) * model.input.scale[0];
        assert!((fitted_mean - mean).abs() < 0.1, "{fitted_mean} vs {mean}");
        assert!((fitted_std - std).abs() < 0.1, "{fitted_std} vs {std}");
    }

    #[test]
    fn training_does_not_lower_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((300, 4), |(_, c)| c as f64 + rng.sample::<f64, _>(StandardNormal));
        let cfg = SpnConfig::default();
        let train = TrainConfig::default();
        let before = spn_loglik(&init_spn(&x, &cfg, train.seed), &x).unwrap();
        let after = spn_loglik(&train_spn(&x, &cfg, &train).unwrap(), &x).unwrap();
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn constant_columns_are_ignored() {
        let mut x = Array2::from_shape_fn((50, 3), |(r, c)| (r * (c + 1)) as f64);
        x.column_mut(1).fill(2.0);
        let model = train_spn(&x, &SpnConfig::default(), &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(model.active, vec![0, 2]);
        assert!(spn_loglik(&model, &x).unwrap().is_finite());
    }

    #[test]
    fn weights_form_probability_vector() {
        let x = Array2::from_shape_fn((40, 2), |(r, c)| ((r + 3 * c) % 7) as f64);
        let model = train_spn(&x, &SpnConfig::default(), &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
        for g in &model.groups {
            assert!((g.weights().sum() - 1.0).abs() < 1e-8);
            assert!(model.leaves(g).sigma.iter().all(|&s| s >= 1e-3));
        }
    }

    #[test]
    fn too_few_samples() {
        let x = Array2::zeros((3, 2));
        assert!(train_spn(&x, &SpnConfig::default(), &TrainConfig::default()).is_err());
    }
}
