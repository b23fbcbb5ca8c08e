use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

/// Labeled samples loaded from disk or generated as a drift/base source.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Original label text, indexed by class id.
    pub class_names: Vec<String>,
}

impl LabeledPool {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Self {
        Self {
            features,
            labels,
            n_classes,
            class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Reads a headed CSV whose last column is the class label.
///
/// Labels are mapped to dense ids in sorted order (numerically when every
/// label parses as an integer). Features are min-max scaled to `[0, 1]` using
/// the whole file; constant columns become zero.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledPool> {
    let path = path.as_ref();
    let file_err = |message: String| Error::CsvFile {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| file_err(e.to_string()))?;
    let width = reader.headers().map_err(|e| file_err(e.to_string()))?.len();
    if width < 2 {
        return Err(file_err("missing label column".into()));
    }
    let dim = width - 1;

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| file_err(e.to_string()))?;
        if record.len() != width {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                column: record.len() + 1,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().take(dim).enumerate() {
            let cell_err = |message: &str| Error::Csv {
                path: path.to_path_buf(),
                row,
                column: col + 1,
                message: message.to_string(),
            };
            if cell.is_empty() {
                return Err(cell_err("missing value"));
            }
            let v: f64 = cell.parse().map_err(|_| cell_err("non-numeric feature"))?;
            if !v.is_finite() {
                return Err(cell_err("non-finite feature"));
            }
            values.push(v);
        }
        let label = &record[dim];
        if label.is_empty() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                column: width,
                message: "missing label".into(),
            });
        }
        raw_labels.push(label.to_string());
    }
    if raw_labels.is_empty() {
        return Err(file_err("empty file".into()));
    }

    let mut features = Array2::from_shape_vec((raw_labels.len(), dim), values)
        .expect("row-major buffer matches shape");
    for mut col in features.columns_mut() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| (v - lo) / span);
        } else {
            col.fill(0.0);
        }
    }

    let distinct: BTreeSet<&str> = raw_labels.iter().map(String::as_str).collect();
    let mut class_names: Vec<String> = distinct.into_iter().map(str::to_string).collect();
    if class_names.iter().all(|s| s.parse::<i64>().is_ok()) {
        class_names.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    let labels = raw_labels
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).unwrap())
        .collect();
    Ok(LabeledPool {
        features,
        labels,
        n_classes: class_names.len(),
        class_names,
    })
}
