//! Independent oracles shared by the oracle, property and acceptance tests.
//!
//! Every check returns `Err(description)` instead of panicking so that the
//! acceptance target can print one line per criterion before asserting.

#![allow(dead_code)]

use cdcsde::control::{vote, ControlConfig, ControlState, Zone};
use cdcsde::evaluation::metrics_from_parts;
use cdcsde::models::{
    augmented_gradients, compute_kfac, cross_entropy_grad, mse_grad, natural_gradient_sq_norm,
    Activation, Dense, MlpParams, SpnGroup, SpnModel, Standardizer,
};
use cdcsde::signals::{
    gaussian_overlap, hellinger_term, q1_ewma_delayed_kpi, q3_hellinger, q4_from_losses,
    HellingerBins, KpiBuffer,
};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

// Finite differences ---------------------------------------------------------

const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between `analytic` and a central difference of
/// `loss` over every coordinate reachable through `coord`.
fn fd_worst<M: Clone>(
    base: &M,
    n: usize,
    coord: impl Fn(&mut M, usize) -> &mut f64,
    loss: impl Fn(&M) -> f64,
    analytic: &[f64],
) -> f64 {
    assert_eq!(analytic.len(), n);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let mut plus = base.clone();
        *coord(&mut plus, k) += FD_STEP;
        let mut minus = base.clone();
        *coord(&mut minus, k) -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[k], numeric));
    }
    worst
}

/// Parameter `k` of an MLP in layer order, weights row-major then bias.
fn mlp_coord(m: &mut MlpParams, mut k: usize) -> &mut f64 {
    for layer in &mut m.layers {
        let nw = layer.weights.len();
        if k < nw {
            let cols = layer.weights.ncols();
            return &mut layer.weights[[k / cols, k % cols]];
        }
        k -= nw;
        if k < layer.bias.len() {
            return &mut layer.bias[k];
        }
        k -= layer.bias.len();
    }
    panic!("parameter index out of range")
}

fn flatten_mlp_grads(grads: &[cdcsde::models::LayerGrad]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
        .collect()
}

fn random_mlp(rng: &mut ChaCha8Rng, widths: &[usize], last: Activation) -> MlpParams {
    let n = widths.len() - 1;
    let layers = (0..n)
        .map(|l| {
            let act = if l + 1 == n { last } else { Activation::Relu };
            Dense::new(
                randn(rng, widths[l + 1], widths[l], 0.8),
                randv(rng, widths[l + 1], 0.3),
                act,
            )
        })
        .collect();
    MlpParams::new(Standardizer::identity(widths[0]), layers)
}

pub fn classifier_fd() -> Check {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_mlp(&mut rng, &[3, 4, 3], Activation::Softmax);
        let x = randn(&mut rng, 6, 3, 1.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let (_, grads) = cross_entropy_grad(&model, &x, &labels);
        let worst = fd_worst(
            &model,
            model.n_params(),
            mlp_coord,
            |m| cross_entropy_grad(m, &x, &labels).0,
            &flatten_mlp_grads(&grads),
        );
        ensure(worst <= 1e-4, || format!("classifier seed {seed}: rel err {worst:.3e}"))?;
    }
    Ok(())
}

pub fn autoencoder_fd() -> Check {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let model = random_mlp(&mut rng, &[4, 2, 4], Activation::Identity);
        let x = randn(&mut rng, 5, 4, 1.0);
        let (_, grads) = mse_grad(&model, &x, &x);
        let worst = fd_worst(
            &model,
            model.n_params(),
            mlp_coord,
            |m| mse_grad(m, &x, &x).0,
            &flatten_mlp_grads(&grads),
        );
        ensure(worst <= 1e-4, || format!("autoencoder seed {seed}: rel err {worst:.3e}"))?;
    }
    Ok(())
}

/// Two sum nodes over features {0, 2} and {1} of a 3-D input.
pub fn random_spn(rng: &mut ChaCha8Rng) -> SpnModel {
    let mut group = |features: Vec<usize>, k: usize| {
        let d = features.len();
        let stdevs = Array2::from_shape_fn((k, d), |_| rng.random_range(0.4..1.5));
        let weights = Array1::from_shape_fn(k, |_| rng.random_range(0.2..1.0));
        let weights = &weights / weights.sum();
        SpnGroup::from_params(features, randn(rng, k, d, 1.0), &stdevs, &weights, 1e-3)
    };
    let groups = vec![group(vec![0, 2], 3), group(vec![1], 2)];
    SpnModel {
        input: Standardizer::identity(3),
        active: vec![0, 1, 2],
        groups,
        sigma_floor: 1e-3,
    }
}

fn spn_coord(m: &mut SpnModel, mut k: usize) -> &mut f64 {
    for g in &mut m.groups {
        for arr in [&mut g.means, &mut g.log_scales] {
            if k < arr.len() {
                let cols = arr.ncols();
                return &mut arr[[k / cols, k % cols]];
            }
            k -= arr.len();
        }
        if k < g.logits.len() {
            return &mut g.logits[k];
        }
        k -= g.logits.len();
    }
    panic!("parameter index out of range")
}

pub fn spn_fd() -> Check {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let model = random_spn(&mut rng);
        let x = randn(&mut rng, 7, 3, 1.0);
        let (_, grads) = model.loglik_grad(&x).map_err(|e| e.to_string())?;
        let flat: Vec<f64> = grads
            .iter()
            .flat_map(|g| {
                g.means
                    .iter()
                    .chain(g.log_scales.iter())
                    .chain(g.logits.iter())
                    .copied()
            })
            .collect();
        let worst = fd_worst(
            &model,
            flat.len(),
            spn_coord,
            |m| m.loglik_grad(&x).unwrap().0,
            &flat,
        );
        ensure(worst <= 1e-4, || format!("spn seed {seed}: rel err {worst:.3e}"))?;
    }
    Ok(())
}

// SPN in the probability domain -----------------------------------------------

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    let u = (x - m) / s;
    (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Density of each row as a plain product of weighted sums of leaf products.
pub fn spn_density_prob_domain(model: &SpnModel, x: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|row| {
            model
                .groups
                .iter()
                .map(|g| {
                    let w = g.logits.mapv(f64::exp);
                    let w = &w / w.sum();
                    (0..g.n_components())
                        .map(|c| {
                            w[c] * g
                                .features
                                .iter()
                                .enumerate()
                                .map(|(j, &f)| {
                                    let s = g.log_scales[[c, j]].exp() + model.sigma_floor;
                                    normal_pdf(row[model.active[f]], g.means[[c, j]], s)
                                })
                                .product::<f64>()
                        })
                        .sum::<f64>()
                })
                .product()
        })
        .collect()
}

pub fn spn_log_vs_prob() -> Check {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let model = random_spn(&mut rng);
        let x = randn(&mut rng, 20, 3, 1.5);
        let logd = model.log_density(&x).map_err(|e| e.to_string())?;
        for (l, p) in logd.iter().zip(spn_density_prob_domain(&model, &x)) {
            let err = (l - p.ln()).abs();
            ensure(err <= 1e-9, || format!("spn seed {seed}: log {l} vs prob-domain {} ({err:.3e})", p.ln()))?;
        }
    }
    Ok(())
}

/// Bayes rule over the component joint densities, probability domain.
pub fn spn_responsibilities_bayes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let model = random_spn(&mut rng);
    let x = randn(&mut rng, 10, 3, 1.0);
    for (gi, g) in model.groups.iter().enumerate() {
        let resp = model.responsibilities(gi, &x).map_err(|e| e.to_string())?;
        let w = g.weights();
        for (r, row) in x.rows().into_iter().enumerate() {
            let joint: Vec<f64> = (0..g.n_components())
                .map(|c| {
                    w[c] * g
                        .features
                        .iter()
                        .enumerate()
                        .map(|(j, &f)| {
                            let s = g.log_scales[[c, j]].exp() + model.sigma_floor;
                            normal_pdf(row[f], g.means[[c, j]], s)
                        })
                        .product::<f64>()
                })
                .collect();
            let total: f64 = joint.iter().sum();
            for c in 0..joint.len() {
                let err = (resp[[r, c]] - joint[c] / total).abs();
                ensure(err <= 1e-12, || format!("group {gi} row {r} comp {c}: {err:.3e}"))?;
            }
        }
    }
    Ok(())
}

// K-FAC against a dense Kronecker solve ---------------------------------------

/// Solves `m v = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut v = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * v[k]).sum();
        v[row] = (b[row] - tail) / m[row][row];
    }
    v
}

/// `(A + λI) ⊗ (G + λI)` as a dense matrix.
pub fn dense_kron(a: &Array2<f64>, g: &Array2<f64>, lambda: f64) -> Vec<Vec<f64>> {
    let (na, ng) = (a.nrows(), g.nrows());
    let ad = |i: usize, j: usize| a[[i, j]] + if i == j { lambda } else { 0.0 };
    let gd = |i: usize, j: usize| g[[i, j]] + if i == j { lambda } else { 0.0 };
    let mut out = vec![vec![0.0; na * ng]; na * ng];
    for ia in 0..na {
        for ja in 0..na {
            for ig in 0..ng {
                for jg in 0..ng {
                    out[ia * ng + ig][ja * ng + jg] = ad(ia, ja) * gd(ig, jg);
                }
            }
        }
    }
    out
}

/// Column-major `vec` of a matrix.
fn vec_cm(m: &Array2<f64>) -> Vec<f64> {
    m.t().iter().copied().collect()
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn kfac_dense_oracle() -> Check {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let w = randn(&mut rng, 2, 2, 1.0);
        let b = randv(&mut rng, 2, 0.5);
        let model = MlpParams::new(
            Standardizer::identity(2),
            vec![Dense::new(w.clone(), b.clone(), Activation::Softmax)],
        );
        let n = 8;
        let x = randn(&mut rng, n, 2, 1.0);
        let labels: Vec<usize> = (0..n).map(|r| r % 2).collect();
        let lambda = 1e-2;

        // Factors and gradient from first principles.
        let mut a = Array2::<f64>::zeros((3, 3));
        let mut g = Array2::<f64>::zeros((2, 2));
        let mut grad = Array2::<f64>::zeros((2, 3));
        for r in 0..n {
            let at = [x[[r, 0]], x[[r, 1]], 1.0];
            let z: Vec<f64> = (0..2)
                .map(|o| w[[o, 0]] * at[0] + w[[o, 1]] * at[1] + b[o])
                .collect();
            let mut d = softmax_row(&z);
            d[labels[r]] -= 1.0;
            for i in 0..3 {
                for j in 0..3 {
                    a[[i, j]] += at[i] * at[j] / n as f64;
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    g[[i, j]] += d[i] * d[j] / n as f64;
                }
                for j in 0..3 {
                    grad[[i, j]] += d[i] * at[j] / n as f64;
                }
            }
        }
        let nat = gauss_solve(dense_kron(&a, &g, lambda), vec_cm(&grad));
        let expected = nat.iter().map(|v| v * v).sum::<f64>() / 6.0;

        let kfac = compute_kfac(&model, &x, &labels, lambda).map_err(|e| e.to_string())?;
        let lib_grad = augmented_gradients(&model, &x, &labels).map_err(|e| e.to_string())?;
        let factor_err = (&kfac.layers[0].a - &a)
            .iter()
            .chain((&kfac.layers[0].g - &g).iter())
            .chain((&lib_grad[0] - &grad).iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(factor_err <= 1e-12, || format!("seed {seed}: factor mismatch {factor_err:.3e}"))?;
        let got = natural_gradient_sq_norm(&model, &kfac, &x, &labels).map_err(|e| e.to_string())?;
        let err = (got - expected).abs() / expected.abs().max(1.0);
        ensure(err <= 1e-8, || format!("seed {seed}: natural gradient {got} vs dense {expected} ({err:.3e})"))?;
    }
    Ok(())
}

/// Two-layer net: the block-diagonal natural gradient equals a dense solve
/// per block.
pub fn kfac_block_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let model = random_mlp(&mut rng, &[2, 2, 2], Activation::Softmax);
    let x = randn(&mut rng, 10, 2, 1.0);
    let labels: Vec<usize> = (0..10).map(|r| (r * 7 % 3) % 2).collect();
    let lambda = 5e-2;
    let kfac = compute_kfac(&model, &x, &labels, lambda).map_err(|e| e.to_string())?;
    let grads = augmented_gradients(&model, &x, &labels).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for (f, grad) in kfac.layers.iter().zip(&grads) {
        let v = gauss_solve(dense_kron(&f.a, &f.g, lambda), vec_cm(grad));
        total += v.iter().map(|x| x * x).sum::<f64>();
    }
    let expected = total / model.n_params() as f64;
    let got = natural_gradient_sq_norm(&model, &kfac, &x, &labels).map_err(|e| e.to_string())?;
    let err = (got - expected).abs() / expected.abs().max(1.0);
    ensure(err <= 1e-8, || format!("block natural gradient {got} vs {expected} ({err:.3e})"))
}

// Gaussian overlap ----------------------------------------------------------------

/// Trapezoid integral of `min(N1, N2)` over ±12 deviations of both.
pub fn overlap_trapezoid(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
    let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| normal_pdf(x, m1, s1).min(normal_pdf(x, m2, s2));
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

pub fn overlap_vs_trapezoid() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    for k in 0..100 {
        let m1 = rng.random_range(-2.0..2.0);
        let m2 = rng.random_range(-2.0..2.0);
        let s1 = rng.random_range(0.1..1.5);
        let s2 = rng.random_range(0.1..1.5);
        let closed = gaussian_overlap(m1, s1, m2, s2);
        let oracle = overlap_trapezoid(m1, s1, m2, s2);
        ensure((closed - oracle).abs() <= 1e-4, || {
            format!("pair {k} N({m1},{s1}) N({m2},{s2}): {closed} vs {oracle}")
        })?;
    }
    for (m, s) in [(0.0, 1.0), (3.5, 0.2), (-1.0, 4.0)] {
        let v = gaussian_overlap(m, s, m, s);
        ensure((v - 1.0).abs() <= 1e-12, || format!("overlap(N,N) = {v}"))?;
    }
    Ok(())
}

// Control chart recomputed from scratch -----------------------------------------

/// Zones from a direct recomputation: `p_i` is the mean of the first `i`
/// scores and `s_i` the population deviation of `p_1..p_i`.
pub fn control_oracle(qs: &[f64], cfg: &ControlConfig) -> Vec<Zone> {
    let mut ps = Vec::new();
    let mut minimum: Option<(f64, f64)> = None;
    let mut zone = Zone::Safe;
    let mut out = Vec::new();
    for i in 1..=qs.len() {
        let p = qs[..i].iter().sum::<f64>() / i as f64;
        ps.push(p);
        let mean_p = ps.iter().sum::<f64>() / i as f64;
        let s = (ps.iter().map(|v| (v - mean_p).powi(2)).sum::<f64>() / i as f64).sqrt();
        if i >= cfg.warmup {
            if minimum.is_none_or(|(pm, sm)| p + s < pm + sm) {
                minimum = Some((p, s));
            }
            let (pm, sm) = minimum.unwrap();
            let se = sm.max(cfg.eps_floor);
            zone = if p + s > pm + 3.0 * se {
                Zone::Drift
            } else if p + s > pm + 2.0 * se {
                Zone::Warning
            } else if p + s < pm + 2.0 * se {
                Zone::Safe
            } else if zone == Zone::Drift {
                Zone::Warning
            } else {
                zone
            };
        }
        out.push(zone);
    }
    out
}

pub fn run_control(qs: &[f64], cfg: &ControlConfig) -> (Vec<Zone>, Vec<Vec<usize>>) {
    let mut st = ControlState::new(cfg.clone());
    let mut zones = Vec::new();
    let mut sets = Vec::new();
    for (i, &q) in qs.iter().enumerate() {
        zones.push(st.observe(q, i).unwrap());
        sets.push(st.warning_batches().to_vec());
    }
    (zones, sets)
}

// Hand cases ----------------------------------------------------------------------

pub fn q4_hand() -> Check {
    let (v, _) = q4_from_losses(0.37, 0.37);
    ensure((v - 1f64.tanh()).abs() <= 1e-12, || format!("q4 = {v}"))
}

pub fn hellinger_hand() -> Check {
    let p = [0.2, 0.3, 0.5];
    ensure(hellinger_term(&p, &p).abs() <= 1e-12, || "identical proportions".into())?;
    let d = hellinger_term(&[1.0, 0.0], &[0.0, 1.0]);
    ensure((d - 2f64.sqrt()).abs() <= 1e-12, || format!("disjoint = {d}"))?;
    let bins = HellingerBins::from_parts(vec![vec![0.5]], vec![vec![0.5, 0.5]]);
    let h = q3_hellinger(&bins, &array![[0.1], [0.2]]).map_err(|e| e.to_string())?;
    ensure((h - (2.0 - 2f64.sqrt()).sqrt()).abs() <= 1e-12, || format!("hand case = {h}"))
}

pub fn q1_hand() -> Check {
    let mut buf = KpiBuffer::new(3, 0.5);
    for (s, v) in [(0, 0.1), (1, 0.2), (2, 0.3)] {
        buf.push(s, v);
    }
    let q = q1_ewma_delayed_kpi(&buf).unwrap();
    ensure((q - 0.2125).abs() <= 1e-12, || format!("q1 = {q}"))
}

pub fn control_hand() -> Check {
    use Zone::{Drift as D, Safe as S, Warning as W};
    let cfg = ControlConfig {
        warmup: 5,
        eps_floor: 1e-8,
    };
    let jump = [0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0];
    let (zones, _) = run_control(&jump, &cfg);
    ensure(zones == vec![S, S, S, S, S, D, D, D], || format!("jump zones {zones:?}"))?;
    ensure(zones == control_oracle(&jump, &cfg), || "jump disagrees with recomputation".into())?;

    let decay = [0.5, 0.56, 0.45, 0.55, 0.49, 0.49, 0.6, 0.51, 0.5, 0.54, 0.4, 0.4];
    let (zones, sets) = run_control(&decay, &cfg);
    ensure(zones == vec![S, S, S, S, S, S, W, W, S, W, S, S], || format!("decay zones {zones:?}"))?;
    ensure(zones == control_oracle(&decay, &cfg), || "decay disagrees with recomputation".into())?;
    ensure(sets[7] == vec![6, 7] && sets[8].is_empty() && sets[11].is_empty(), || {
        format!("warning sets {sets:?}")
    })?;

    let (zones, _) = run_control(&[0.3; 40], &ControlConfig::default());
    ensure(zones.iter().all(|&z| z == S), || "constant series left Safe".into())
}

pub fn vote_hand() -> Check {
    use Zone::{Drift as D, Safe as S, Warning as W};
    let all = [true; 6];
    ensure(vote(&[D, S, S, S, S, S], &all).0, || "q1 alone must fire".into())?;
    ensure(vote(&[S, D, S, D, S, D], &all).0, || "3 of 5 must fire".into())?;
    ensure(!vote(&[S, D, S, S, D, S], &all).0, || "2 of 5 must not fire".into())?;
    ensure(!vote(&[W, D, D, W, W, W], &all).0, || "warnings do not count".into())
}

pub fn metrics_hand() -> Check {
    let m = metrics_from_parts(0.9, &[110], &[100]);
    ensure(
        m.mtd == Some(10.0) && m.mdr == Some(0.0) && m.td == 1 && m.mtfa.is_none(),
        || format!("single detection {m:?}"),
    )?;
    let m = metrics_from_parts(0.9, &[50, 70, 110], &[100]);
    ensure(
        m.mtd == Some(10.0) && m.mtfa == Some(20.0) && m.td == 3 && m.mdr == Some(0.0),
        || format!("false alarms before drift {m:?}"),
    )
}
