//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of nonzero differences handled by the exact distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
    Less,
}

impl std::fmt::Display for Alternative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Greater => "greater",
            Alternative::Less => "less",
        })
    }
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" | "two_sided" => Ok(Alternative::TwoSided),
            "greater" => Ok(Alternative::Greater),
            "less" => Ok(Alternative::Less),
            other => Err(Error::Config(format!(
                "unknown alternative {other:?} (expected two-sided, greater or less)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W−)` for two-sided tests, `W+` otherwise.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub method: Method,
    pub warning: Option<String>,
}

/// Two-sided test on `a − b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, Alternative::TwoSided)
}

/// Zero differences are dropped and tied `|d|` share their average rank. Up
/// to [`EXACT_MAX_N`] pairs the null distribution of `W+` is enumerated
/// exactly (conditional on the tie pattern); beyond that a normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon samples", &[a.len()], &[b.len()]));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::OutOfRange(format!("non-finite sample value {v}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() && !a.is_empty() {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            method: Method::Degenerate,
            warning: Some("all differences are zero".into()),
        });
    }
    let n = d.len();
    if n < MIN_PAIRS {
        return Err(Error::Config(format!(
            "signed-rank test needs at least {MIN_PAIRS} nonzero differences, got {n}"
        )));
    }
    // Doubled ranks keep averaged tied ranks integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; doubled average is i+j+2
        for &k in &order[i..=j] {
            rank2[k] = (i + j + 2) as u64;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus2: u64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let total2: u64 = rank2.iter().sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let statistic = match alternative {
        Alternative::TwoSided => w_plus.min(w_minus),
        _ => w_plus,
    };
    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&rank2, w_plus2, total2, alternative), Method::Exact)
    } else {
        (normal_p(n, w_plus, tie_term, alternative), Method::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        method,
        warning: None,
    })
}

fn exact_p(rank2: &[u64], w_plus2: u64, total2: u64, alternative: Alternative) -> f64 {
    // counts[s] = number of sign assignments whose doubled W+ equals s
    let mut counts = vec![0.0f64; total2 as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in rank2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(rank2.len() as i32);
    let lower = |w: u64| counts[..=w as usize].iter().sum::<f64>() / all;
    let upper = |w: u64| counts[w as usize..].iter().sum::<f64>() / all;
    match alternative {
        Alternative::Greater => upper(w_plus2),
        Alternative::Less => lower(w_plus2),
        Alternative::TwoSided => {
            let small = w_plus2.min(total2 - w_plus2);
            (2.0 * lower(small)).min(1.0)
        }
    }
}

fn normal_p(n: usize, w_plus: f64, tie_term: f64, alternative: Alternative) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let phi = Normal::standard();
    match alternative {
        Alternative::TwoSided => {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * (1.0 - phi.cdf(z))).min(1.0)
        }
        Alternative::Greater => 1.0 - phi.cdf((w_plus - mean - 0.5) / sd),
        Alternative::Less => phi.cdf((w_plus - mean + 0.5) / sd),
    }
}

/// One upper-triangle cell of a pairwise comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseEntry {
    pub first: String,
    pub second: String,
    pub result: Option<WilcoxonResult>,
    /// Why `result` is missing, if it is.
    pub note: Option<String>,
}

/// Tests between every pair of named samples (`k·(k−1)/2` cells), `first`
/// playing the role of `a`. Positions where either sample is NaN are left out
/// of that pair's test.
pub fn pairwise_wilcoxon(samples: &[(String, Vec<f64>)], alternative: Alternative) -> Vec<PairwiseEntry> {
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b): (Vec<f64>, Vec<f64>) = samples[i]
                .1
                .iter()
                .zip(&samples[j].1)
                .filter(|(x, y)| !x.is_nan() && !y.is_nan())
                .unzip();
            let (result, note) = match wilcoxon_signed_rank_with(&a, &b, alternative) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(PairwiseEntry {
                first: samples[i].0.clone(),
                second: samples[j].0.clone(),
                result,
                note,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.method, Method::Exact);
        let g = wilcoxon_signed_rank_with(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], Alternative::Greater).unwrap();
        assert_eq!(g.p_value, 1.0 / 32.0);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.statistic, 0.0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn too_few_pairs_or_mismatched_lengths() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5]).is_err());
    }

    #[test]
    fn ties_use_average_ranks() {
        // |d| = 1,1,2,3,4 → ranks 1.5,1.5,3,4,5; negative on one of the ties
        let r = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, 3.0, 4.0], &[0.0; 5]).unwrap();
        assert_eq!(r.w_minus, 1.5);
        assert_eq!(r.w_plus, 13.5);
        // W+ ≥ 13.5 among 32 assignments of {1.5,1.5,3,4,5}: sums ≥ 13.5 are
        // 15 (all), 13.5 (one tied rank off, twice) → 3/32; two-sided 6/32
        assert!((r.p_value - 6.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn normal_branch_for_large_n() {
        let a: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let b: Vec<f64> = (1..=40)
            .map(|i| i as f64 - if i % 3 == 0 { -0.5 } else { 1.0 })
            .collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, Method::Normal);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let swapped = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(r.p_value, swapped.p_value);
    }

    #[test]
    fn four_variants_give_six_cells() {
        let s: Vec<(String, Vec<f64>)> = (0..4)
            .map(|k| (format!("v{k}"), (0..6).map(|i| (i * (k + 1)) as f64).collect()))
            .collect();
        let m = pairwise_wilcoxon(&s, Alternative::TwoSided);
        assert_eq!(m.len(), 6);
        assert_eq!((m[0].first.as_str(), m[0].second.as_str()), ("v0", "v1"));
    }

    #[test]
    fn missing_values_drop_only_their_pair() {
        let s = vec![
            ("a".to_string(), vec![1.0, 2.0, 3.0, 4.0, 5.0, f64::NAN]),
            ("b".to_string(), vec![0.0; 6]),
        ];
        let m = pairwise_wilcoxon(&s, Alternative::TwoSided);
        let r = m[0].result.as_ref().unwrap();
        assert_eq!(r.n, 5);
        assert_eq!(r.p_value, 0.0625);
        let one_sided = pairwise_wilcoxon(&s, Alternative::Greater);
        assert_eq!(one_sided[0].result.as_ref().unwrap().p_value, 1.0 / 32.0);
        assert_eq!("two-sided".parse::<Alternative>().unwrap(), Alternative::TwoSided);
        assert!("both".parse::<Alternative>().is_err());
    }
}
