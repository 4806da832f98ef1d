//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsadv::data::{load_ucr, synthetic_bumps, Dataset};
use tsadv::dtw::DistanceMatrix;
use tsadv::nn::{Tape, Tensor, Var};
use tsadv::pipeline::prepare_data;

/// DTW by enumerating every monotone warping path from (0,0) to (n-1,m-1).
pub fn dtw_by_enumeration(q: &[f64], c: &[f64]) -> f64 {
    fn walk(q: &[f64], c: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (q[i] - c[j]).powi(2);
        if i + 1 == q.len() && j + 1 == c.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < q.len() {
            walk(q, c, i + 1, j, acc, best);
        }
        if j + 1 < c.len() {
            walk(q, c, i, j + 1, acc, best);
        }
        if i + 1 < q.len() && j + 1 < c.len() {
            walk(q, c, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(q, c, 0, 0, 0.0, &mut best);
    best.sqrt()
}

/// Two-sided signed-rank p-value by listing all 2^n sign assignments of the
/// ranks of `|d|`. Assumes no zero differences and no ties in `|d|`.
pub fn wilcoxon_by_enumeration(d: &[f64]) -> f64 {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = (r + 1) as f64;
    }
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let centre = (n * (n + 1)) as f64 / 4.0;
    let dev = (observed - centre).abs();
    let total = 1u64 << n;
    let extreme = (0..total)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| rank[i]).sum();
            (w - centre).abs() >= dev - 1e-12
        })
        .count();
    extreme as f64 / total as f64
}

pub mod layers;

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub const FD_EPS: f64 = 1e-4;
/// Magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences for every input tensor. At most `max_coords` coordinates per
/// input are probed (evenly spaced) when the input is large.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], max_coords: usize, f: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let step = (input.len() / max_coords).max(1);
        for idx in (0..input.len()).step_by(step) {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[idx] += FD_EPS;
            let up = eval(&vals);
            vals[k].data_mut()[idx] -= 2.0 * FD_EPS;
            let down = eval(&vals);
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error: worst,
        checked,
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Entries bounded away from zero (for kinks such as relu).
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct entries at least 0.05 apart (no near-ties inside pooling windows).
pub fn distinct_values(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// Reduces `v` to a scalar through fixed random weights so every output
/// element contributes to the checked gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut rng, &shape, 1.0);
    tape.weighted_sum(v, w).unwrap()
}

/// Random `[rows, cols]` matrix over `classes` with every class present and a
/// unique minimum in every row.
pub fn random_matrix(rng: &mut ChaCha8Rng) -> DistanceMatrix {
    let classes = rng.gen_range(2..=5);
    let cols = rng.gen_range(classes..=30);
    let rows = rng.gen_range(1..=20);
    let mut labels: Vec<usize> = (0..cols)
        .map(|j| if j < classes { j } else { rng.gen_range(0..classes) })
        .collect();
    labels.shuffle(rng);
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(1.0..10.0)).collect();
        row[rng.gen_range(0..cols)] = rng.gen_range(0.0..0.99);
        values.extend(row);
    }
    DistanceMatrix::new(rows, values, labels, classes).unwrap()
}

/// ItalyPowerDemand (24 points, 2 classes): the teacher's train file and the
/// attacker's available data, prepared.
pub fn italy_power_demand() -> (Dataset, Dataset) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/ItalyPowerDemand");
    let train = load_ucr(&dir.join("ItalyPowerDemand_TRAIN.tsv"), '\t').unwrap();
    let test = load_ucr(&dir.join("ItalyPowerDemand_TEST.tsv"), '\t').unwrap();
    prepare_data(train, test, false).unwrap()
}

/// Bump toy problem: `n_train` rows for the teacher and `n_available` for
/// the attacker, from one generator stream.
pub fn bumps(len: usize, n_train: usize, n_available: usize, seed: u64) -> (Dataset, Dataset) {
    let all = synthetic_bumps("bumps", n_train + n_available, len, seed);
    let mut train = all.clone();
    train.series.truncate(n_train);
    let mut available = all;
    available.series.drain(..n_train);
    for (i, s) in available.series.iter_mut().enumerate() {
        s.source_id = i;
    }
    (train, available)
}
