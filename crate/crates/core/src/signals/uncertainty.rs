use ndarray::Array2;
use libm::erfc;

use crate::{Error, Result};

const STDEV_FLOOR: f64 = 1e-4;

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln()
}

/// `∫ min(N(m1, s1²), N(m2, s2²)) dx`, from the (at most two) crossing
/// points of the densities and the normal CDF on each segment.
pub fn gaussian_overlap(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    // log N1 - log N2 = a x² + b x + c.
    let a = 0.5 / (s2 * s2) - 0.5 / (s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = 0.5 * m2 * m2 / (s2 * s2) - 0.5 * m1 * m1 / (s1 * s1) + (s2 / s1).ln();
    let scale = 1.0 / (s1 * s1) + 1.0 / (s2 * s2);
    let mut roots = Vec::with_capacity(2);
    if a.abs() <= 1e-12 * scale {
        if b.abs() <= 1e-12 * scale {
            // Identical densities.
            return 1.0;
        }
        roots.push(-c / b);
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc > 0.0 {
            let sq = disc.sqrt();
            // Numerically stable pair.
            let q = -0.5 * (b + b.signum() * sq);
            roots.push(q / a);
            roots.push(c / q);
        } else if disc == 0.0 {
            roots.push(-b / (2.0 * a));
        }
    }
    roots.sort_by(f64::total_cmp);
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend(roots);
    edges.push(f64::INFINITY);
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0 - (s1 + s2),
            (true, false) => lo + 1.0 + (s1 + s2),
            (false, false) => m1,
        };
        let first_lower = normal_log_pdf(probe, m1, s1) <= normal_log_pdf(probe, m2, s2);
        let (m, s) = if first_lower { (m1, s1) } else { (m2, s2) };
        total += normal_cdf(hi, m, s) - normal_cdf(lo, m, s);
    }
    total.clamp(0.0, 1.0)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STDEV_FLOOR))
}

/// Overlap of Gaussians fitted to the per-sample largest and second-largest
/// predicted probabilities.
pub fn q2_model_uncertainty(proba: &Array2<f64>) -> Result<f64> {
    if proba.nrows() < 2 {
        return Err(Error::OutOfRange(format!(
            "uncertainty needs at least 2 samples, got {}",
            proba.nrows()
        )));
    }
    if proba.ncols() < 2 {
        return Err(Error::OutOfRange(format!(
            "uncertainty needs at least 2 classes, got {}",
            proba.ncols()
        )));
    }
    let mut top1 = Vec::with_capacity(proba.nrows());
    let mut top2 = Vec::with_capacity(proba.nrows());
    for row in proba.rows() {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in row {
            if p > a {
                b = a;
                a = p;
            } else if p > b {
                b = p;
            }
        }
        top1.push(a);
        top2.push(b);
    }
    let (m1, s1) = mean_std(&top1);
    let (m2, s2) = mean_std(&top2);
    Ok(gaussian_overlap(m1, s1, m2, s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_gaussians_overlap_fully() {
        assert_eq!(gaussian_overlap(0.3, 0.1, 0.3, 0.1), 1.0);
        let p = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        assert_eq!(q2_model_uncertainty(&p).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_narrow_gaussians() {
        assert!(gaussian_overlap(0.9, 1e-4, 0.1, 1e-4) < 1e-12);
    }

    #[test]
    fn unit_gaussians_two_apart() {
        // 2 Φ(-1).
        let want = 0.317_310_507_862_914_1;
        let got = gaussian_overlap(0.0, 1.0, 2.0, 1.0);
        assert!((got - want).abs() < 1e-12, "{got}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = gaussian_overlap(0.2, 0.5, 1.1, 0.2);
        let b = gaussian_overlap(1.1, 0.2, 0.2, 0.5);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn too_few_rows_or_classes() {
        assert!(q2_model_uncertainty(&array![[0.4, 0.6]]).is_err());
        assert!(q2_model_uncertainty(&array![[1.0], [1.0]]).is_err());
    }
}
