use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Equal-frequency discretisation of every feature, fitted on training
/// data, together with the training proportions per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HellingerBins {
    /// Inner edges per feature (`bins - 1` of them, non-decreasing). A value
    /// `x` falls in the first bin whose upper edge is `>= x`.
    pub edges: Vec<Vec<f64>>,
    pub train_proportions: Vec<Vec<f64>>,
}

fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x)
}

fn proportions(edges: &[f64], column: ArrayView1<f64>) -> Vec<f64> {
    let mut counts = vec![0.0; edges.len() + 1];
    for &x in column {
        counts[bin_of(edges, x)] += 1.0;
    }
    let n = column.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

impl HellingerBins {
    pub fn fit(x: &Array2<f64>, bins: usize) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("bin training set"));
        }
        if bins == 0 {
            return Err(Error::OutOfRange("bin count must be positive".into()));
        }
        let n = x.nrows();
        let mut edges = Vec::with_capacity(x.ncols());
        let mut train_proportions = Vec::with_capacity(x.ncols());
        for column in x.columns() {
            let mut sorted = column.to_vec();
            sorted.sort_by(f64::total_cmp);
            let e: Vec<f64> = (1..bins).map(|j| sorted[(j * n / bins).min(n - 1)]).collect();
            train_proportions.push(proportions(&e, column));
            edges.push(e);
        }
        Ok(Self {
            edges,
            train_proportions,
        })
    }

    /// Builds bins from explicit edges and training proportions.
    pub fn from_parts(edges: Vec<Vec<f64>>, train_proportions: Vec<Vec<f64>>) -> Self {
        assert_eq!(edges.len(), train_proportions.len());
        for (e, p) in edges.iter().zip(&train_proportions) {
            assert_eq!(e.len() + 1, p.len());
        }
        Self {
            edges,
            train_proportions,
        }
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }
}

/// `sqrt(Σ_z (√p_z − √q_z)²)` for two proportion vectors.
pub fn hellinger_term(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Feature-averaged distance between training and batch bin proportions.
pub fn q3_hellinger(bins: &HellingerBins, batch: &Array2<f64>) -> Result<f64> {
    if batch.ncols() != bins.dim() {
        return Err(Error::DimensionMismatch {
            expected: bins.dim(),
            got: batch.ncols(),
        });
    }
    if batch.nrows() == 0 {
        return Err(Error::EmptyInput("hellinger batch"));
    }
    if bins.dim() == 0 {
        return Ok(0.0);
    }
    let total: f64 = batch
        .columns()
        .into_iter()
        .zip(bins.edges.iter().zip(&bins.train_proportions))
        .map(|(col, (e, p_tr))| hellinger_term(p_tr, &proportions(e, col)))
        .sum();
    Ok(total / bins.dim() as f64)
}
