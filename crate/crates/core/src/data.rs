//! Univariate labeled time series: UCR-format ingestion, label remapping,
//! gap filling / resampling, and the class-balanced evaluation split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    /// Remapped class index; `None` before remapping or for unlabeled data.
    pub label: Option<usize>,
    /// Label exactly as it appeared in the source file.
    pub raw_label: i64,
    /// Row index in the originating file.
    pub source_id: usize,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, label: usize, source_id: usize) -> Self {
        TimeSeries {
            values,
            label: Some(label),
            raw_label: label as i64,
            source_id,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<TimeSeries>,
    /// Sorted distinct raw labels; position is the remapped index.
    pub classes: Vec<i64>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Common length of all series, or `None` when lengths differ or the set is empty.
    pub fn series_len(&self) -> Option<usize> {
        let first = self.series.first()?.len();
        self.series.iter().all(|s| s.len() == first).then_some(first)
    }

    pub fn label_map(&self) -> BTreeMap<i64, usize> {
        self.classes.iter().enumerate().map(|(i, &raw)| (raw, i)).collect()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.series.iter().map(|s| s.values.as_slice()).collect()
    }

    /// Remapped labels of every series; errors if any series is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.series
            .iter()
            .map(|s| {
                s.label.ok_or_else(|| {
                    Error::Restricted(format!("series {} of {} carries no label", s.source_id, self.name))
                })
            })
            .collect()
    }

    /// Copy with every label removed, for code paths that must not see ground truth.
    pub fn unlabeled(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.series {
            s.label = None;
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.series {
            if let Some(l) = s.label {
                if l < counts.len() {
                    counts[l] += 1;
                }
            }
        }
        counts
    }

    /// Checks the post-preprocessing invariants: labels in range, equal finite lengths.
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::Empty(format!("dataset {} has no series", self.name)));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidDataset(format!(
                "{} has {} class(es); at least 2 are required",
                self.name,
                self.num_classes()
            )));
        }
        let len = self
            .series_len()
            .ok_or_else(|| Error::InvalidDataset(format!("{} has series of unequal length", self.name)))?;
        if len == 0 {
            return Err(Error::InvalidDataset(format!("{} has empty series", self.name)));
        }
        for s in &self.series {
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "series {} of {} contains non-finite values",
                    s.source_id, self.name
                )));
            }
            if let Some(l) = s.label {
                if l >= self.num_classes() {
                    return Err(Error::InvalidDataset(format!(
                        "series {} label {l} outside [0, {})",
                        s.source_id,
                        self.num_classes()
                    )));
                }
            }
        }
        Ok(())
    }

    fn subset(&self, name: String, idx: &[usize]) -> Dataset {
        Dataset {
            name,
            series: idx.iter().map(|&i| self.series[i].clone()).collect(),
            classes: self.classes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPair {
    pub d_eval: Dataset,
    pub d_test: Dataset,
    pub seed: u64,
}

fn parse_field(field: &str) -> Option<f64> {
    let f = field.trim();
    if f.is_empty() || f == "?" || f.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    f.parse::<f64>().ok()
}

/// Parses UCR-style text: one series per line, class label in the first field.
/// Missing values (`NaN`, `?`, empty) are kept as NaN for [`preprocess`].
pub fn parse_ucr(name: &str, text: &str, delimiter: char) -> Result<Dataset> {
    let mut series = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim_end_matches('\r').split(delimiter);
        let label_field = fields.next().unwrap_or_default().trim();
        let label = label_field
            .parse::<f64>()
            .ok()
            .filter(|l| l.is_finite() && l.fract() == 0.0)
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("class label {label_field:?} is not an integer"),
            })?;
        let values = fields
            .enumerate()
            .map(|(col, f)| {
                parse_field(f).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("field {} ({:?}) is not a number", col + 2, f.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "row has a label but no values".into(),
            });
        }
        series.push(TimeSeries {
            values,
            label: None,
            raw_label: label as i64,
            source_id: series.len(),
        });
    }
    if series.is_empty() {
        return Err(Error::Empty(format!("{name} contains no rows")));
    }
    Ok(Dataset {
        name: name.to_string(),
        series,
        classes: Vec::new(),
    })
}

pub fn load_ucr(path: &Path, delimiter: char) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_ucr(&name, &text, delimiter)
}

/// Serializes raw labels and values; floats use the shortest round-tripping form.
pub fn to_ucr_string(dataset: &Dataset, delimiter: char) -> String {
    let mut out = String::new();
    for s in &dataset.series {
        let _ = write!(out, "{}", s.raw_label);
        for v in &s.values {
            out.push(delimiter);
            if v.is_nan() {
                out.push_str("NaN");
            } else {
                let _ = write!(out, "{v:?}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_ucr(dataset: &Dataset, path: &Path, delimiter: char) -> Result<()> {
    std::fs::write(path, to_ucr_string(dataset, delimiter)).map_err(|e| Error::io(path, e))
}

/// Replaces raw labels with contiguous indices in ascending raw-label order.
pub fn remap_labels(mut dataset: Dataset) -> Result<Dataset> {
    let mut classes: Vec<i64> = dataset.series.iter().map(|s| s.raw_label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "{} has a single class ({:?})",
            dataset.name, classes
        )));
    }
    for s in &mut dataset.series {
        s.label = Some(classes.binary_search(&s.raw_label).expect("label collected above"));
    }
    dataset.classes = classes;
    Ok(dataset)
}

/// Applies a label map fixed by another dataset (e.g. a train split) so both
/// halves of a UCR archive share class indices.
pub fn apply_label_map(mut dataset: Dataset, classes: &[i64]) -> Result<Dataset> {
    for s in &mut dataset.series {
        let idx = classes.binary_search(&s.raw_label).map_err(|_| {
            Error::InvalidDataset(format!(
                "{}: raw label {} of series {} is not in the reference label set {:?}",
                dataset.name, s.raw_label, s.source_id, classes
            ))
        })?;
        s.label = Some(idx);
    }
    dataset.classes = classes.to_vec();
    Ok(dataset)
}

fn fill_missing(values: &[f64]) -> Result<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
    let (&first, &last) = match (known.first(), known.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Empty("series has no finite values".into())),
    };
    let mut out = values.to_vec();
    for v in out.iter_mut().take(first) {
        *v = values[first];
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = values[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let span = (b - a) as f64;
        for (i, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / span;
            *v = values[a] * (1.0 - w) + values[b] * w;
        }
    }
    Ok(out)
}

fn resample(values: &[f64], target_len: usize) -> Vec<f64> {
    let n = values.len();
    if n == target_len {
        return values.to_vec();
    }
    if target_len == 1 || n == 1 {
        return vec![values[0]; target_len];
    }
    let scale = (n - 1) as f64 / (target_len - 1) as f64;
    (0..target_len)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w = pos - lo as f64;
            values[lo] * (1.0 - w) + values[hi] * w
        })
        .collect()
}

fn znormalize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

/// Fills gaps by linear interpolation (edges take the nearest finite value),
/// resamples linearly to `target_len`, and optionally z-normalizes.
/// Constant series z-normalize to all zeros.
pub fn preprocess(series: &TimeSeries, target_len: usize, znorm: bool) -> Result<TimeSeries> {
    if target_len == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    let filled = fill_missing(&series.values)
        .map_err(|_| Error::InvalidDataset(format!("series {} is entirely missing", series.source_id)))?;
    let mut values = resample(&filled, target_len);
    if znorm {
        znormalize(&mut values);
    }
    Ok(TimeSeries {
        values,
        ..series.clone()
    })
}

/// Preprocesses every series to `target_len` (default: the longest row).
pub fn preprocess_dataset(dataset: &Dataset, target_len: Option<usize>, znorm: bool) -> Result<Dataset> {
    let len = target_len
        .or_else(|| dataset.series.iter().map(|s| s.len()).max())
        .ok_or_else(|| Error::Empty(format!("dataset {} has no series", dataset.name)))?;
    let series = dataset
        .series
        .iter()
        .map(|s| preprocess(s, len, znorm))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        series,
        ..dataset.clone()
    })
}

/// Splits into two class-balanced halves. Classes with an odd count place the
/// extra sample in `d_eval`. Membership depends only on `seed`.
pub fn stratified_split(dataset: &Dataset, seed: u64) -> Result<SplitPair> {
    let labels = dataset.labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::InvalidDataset(format!("label {l} outside class range")))?
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_eval = members.len().div_ceil(2);
        eval_idx.extend_from_slice(&members[..n_eval]);
        test_idx.extend_from_slice(&members[n_eval..]);
    }
    eval_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitPair {
        d_eval: dataset.subset(format!("{}_eval", dataset.name), &eval_idx),
        d_test: dataset.subset(format!("{}_test", dataset.name), &test_idx),
        seed,
    })
}

/// Two-class toy problem: class 0 carries a positive half-sine bump at a
/// random position, class 1 the negated bump; both with Gaussian-ish noise.
/// Classes alternate so every prefix is balanced.
pub fn synthetic_bumps(name: &str, n: usize, len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (len / 3).max(2);
    let series = (0..n)
        .map(|i| {
            let class = i % 2;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let start = rng.gen_range(0..=len.saturating_sub(width));
            let amp = rng.gen_range(0.8..1.2);
            let values = (0..len)
                .map(|t| {
                    // sum of uniforms: cheap bell-shaped noise
                    let noise: f64 = (0..4).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() * 0.1;
                    let bump = if t >= start && t < start + width {
                        let phase = (t - start) as f64 + 0.5;
                        (std::f64::consts::PI * phase / width as f64).sin()
                    } else {
                        0.0
                    };
                    sign * amp * bump + noise
                })
                .collect();
            TimeSeries::new(values, class, i)
        })
        .collect();
    Dataset {
        name: name.to_string(),
        series,
        classes: vec![0, 1],
    }
}
