//! Dynamic time warping with a full warping window, 1-NN classification on
//! top of it, and the probabilistic (Soft-1NN) view of a distance matrix.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// DTW distance: square root of the minimal cumulative squared difference
/// over monotone, contiguous warping paths from the first to the last pair.
///
/// Keeps two rolling rows sized by the shorter series. The recurrence is
/// symmetric in its arguments, so `dtw_distance(a, b) == dtw_distance(b, a)`
/// bit for bit.
pub fn dtw_distance(q: &[f64], c: &[f64]) -> Result<f64> {
    if q.is_empty() || c.is_empty() {
        return Err(Error::Empty("dtw of an empty series".into()));
    }
    let (outer, inner) = if q.len() >= c.len() { (q, c) } else { (c, q) };
    let m = inner.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &a in outer {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let d = a - inner[j - 1];
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = d * d + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m].sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    train_labels: Vec<usize>,
    num_classes: usize,
}

impl DistanceMatrix {
    pub fn new(rows: usize, values: Vec<f64>, train_labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let cols = train_labels.len();
        if values.len() != rows * cols {
            return Err(Error::shape("distance matrix", &[rows, cols], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OutOfRange(format!(
                "distance entries must be finite and nonnegative, found {v}"
            )));
        }
        if let Some(l) = train_labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange(format!("train label {l} outside [0, {num_classes})")));
        }
        Ok(DistanceMatrix {
            rows,
            cols,
            values,
            train_labels,
            num_classes,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: DistanceMatrix = bincode::deserialize(&bytes)?;
        DistanceMatrix::new(m.rows, m.values, m.train_labels, m.num_classes)
    }
}

fn matrix_rows(queries: &[&[f64]], reference: &[&[f64]], parallel: bool) -> Result<Vec<f64>> {
    let row = |q: &&[f64]| -> Result<Vec<f64>> { reference.iter().map(|r| dtw_distance(q, r)).collect() };
    let rows: Vec<Vec<f64>> = if parallel {
        queries.par_iter().map(row).collect::<Result<_>>()?
    } else {
        queries.iter().map(row).collect::<Result<_>>()?
    };
    Ok(rows.concat())
}

/// Pairwise DTW between query series and a labeled reference set. Each cell is
/// computed independently, so the result does not depend on worker count.
pub fn dtw_distance_matrix(queries: &[&[f64]], reference: &Dataset) -> Result<DistanceMatrix> {
    dtw_distance_matrix_with(queries, reference, true)
}

pub fn dtw_distance_matrix_with(queries: &[&[f64]], reference: &Dataset, parallel: bool) -> Result<DistanceMatrix> {
    if queries.is_empty() || reference.is_empty() {
        return Err(Error::Empty("distance matrix needs nonempty sets".into()));
    }
    let values = matrix_rows(queries, &reference.inputs(), parallel)?;
    DistanceMatrix::new(queries.len(), values, reference.labels()?, reference.num_classes())
}

fn argmin_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Label of the nearest reference series per row; ties go to the lowest column.
pub fn nn1_classify(v: &DistanceMatrix) -> Vec<usize> {
    (0..v.rows).map(|i| v.train_labels[argmin_first(v.row(i))]).collect()
}

/// Row-major `[n, classes]` probability matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPredictions {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Soft-1NN: negate the distances, take the per-class maximum (the nearest
/// member of each class), softmax each row at temperature 1, and argmax.
/// Only equivalent to the 1-nearest-neighbour rule; there is deliberately no K.
pub fn soft_1nn(v: &DistanceMatrix) -> Result<SoftPredictions> {
    let c = v.num_classes;
    let mut present = vec![false; c];
    for &l in &v.train_labels {
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::InvalidDataset(format!(
            "class {missing} has no reference series; Soft-1NN needs every class"
        )));
    }
    let mut probs = Vec::with_capacity(v.rows);
    let mut labels = Vec::with_capacity(v.rows);
    for i in 0..v.rows {
        let mut per_class = vec![f64::NEG_INFINITY; c];
        for (&d, &l) in v.row(i).iter().zip(&v.train_labels) {
            per_class[l] = per_class[l].max(-d);
        }
        let p = crate::nn::softmax_slice(&per_class, 1.0);
        labels.push(argmax_first(&p));
        probs.push(p);
    }
    Ok(SoftPredictions { probs, labels })
}

/// 1-NN DTW classifier over a fixed reference (training) set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dtw1nn {
    pub reference: Dataset,
}

impl Dtw1nn {
    pub fn new(reference: Dataset) -> Result<Self> {
        reference.validate()?;
        reference.labels()?;
        Ok(Dtw1nn { reference })
    }

    pub fn num_classes(&self) -> usize {
        self.reference.num_classes()
    }

    pub fn distances(&self, queries: &[&[f64]]) -> Result<DistanceMatrix> {
        dtw_distance_matrix(queries, &self.reference)
    }

    pub fn predict(&self, queries: &[&[f64]]) -> Result<Vec<usize>> {
        Ok(nn1_classify(&self.distances(queries)?))
    }

    pub fn predict_soft(&self, queries: &[&[f64]]) -> Result<SoftPredictions> {
        soft_1nn(&self.distances(queries)?)
    }
}
