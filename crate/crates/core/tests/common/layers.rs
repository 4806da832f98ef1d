//! One randomized finite-difference case per layer kind and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsadv::nn::{ConvGeometry, Tensor};

use super::{away_from_zero, distinct_values, gradcheck, project, random_tensor, GradCheck};

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;

pub type Case = fn(&mut ChaCha8Rng, u64) -> GradCheck;

/// Every op the networks are built from, by name.
pub const CASES: [(&str, Case); 14] = [
    ("conv1d valid", conv1d_valid),
    ("conv1d same", conv1d_same),
    ("conv1d strided", conv1d_strided),
    ("batchnorm train", batchnorm_train),
    ("batchnorm eval", batchnorm_eval),
    ("relu", relu),
    ("maxpool1d", maxpool1d),
    ("global average pool", global_avg_pool),
    ("dense", dense),
    ("flatten + concat", flatten_concat),
    ("softmax", softmax),
    ("cross entropy", cross_entropy),
    ("mse", mse),
    ("linear", linear),
];

/// Worst relative error of `case` over [`INSTANCES`] seeds.
pub fn worst_error(kind: &str, case: Case) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + kind.len() as u64);
        let r = case(&mut rng, seed);
        assert!(r.checked > 0, "{kind}: nothing checked");
        worst = worst.max(r.max_rel_error);
    }
    worst
}

fn merge(a: GradCheck, b: GradCheck) -> GradCheck {
    GradCheck {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        checked: a.checked + b.checked,
    }
}

fn conv_case(rng: &mut ChaCha8Rng, seed: u64, geom: ConvGeometry, k: usize) -> GradCheck {
    let (b, cin, cout) = (2, rng.gen_range(1..4), rng.gen_range(1..4));
    let len = rng.gen_range(k.max(3)..12);
    let inputs = [
        random_tensor(rng, &[b, cin, len], 1.0),
        random_tensor(rng, &[cout, cin, k], 1.0),
        random_tensor(rng, &[cout], 1.0),
    ];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], geom).unwrap();
        project(t, y, seed)
    })
}

pub fn conv1d_valid(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let k = rng.gen_range(1..6);
    let geom = ConvGeometry {
        stride: 1,
        pad_left: 0,
        pad_right: 0,
    };
    conv_case(rng, seed, geom, k)
}

pub fn conv1d_same(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let k = rng.gen_range(1..9);
    let total = k - 1;
    let geom = ConvGeometry {
        stride: 1,
        pad_left: total / 2,
        pad_right: total - total / 2,
    };
    conv_case(rng, seed, geom, k)
}

pub fn conv1d_strided(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let geom = ConvGeometry {
        stride: 2,
        pad_left: 1,
        pad_right: 2,
    };
    conv_case(rng, seed, geom, 3)
}

pub fn batchnorm_train(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let (b, c, l) = (rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..6));
    let inputs = [
        random_tensor(rng, &[b, c, l], 2.0),
        random_tensor(rng, &[c], 1.5),
        random_tensor(rng, &[c], 1.0),
    ];
    gradcheck(&inputs, 200, |t, v| {
        let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, seed)
    })
}

pub fn batchnorm_eval(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let (b, c, l) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..6));
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    let inputs = [
        random_tensor(rng, &[b, c, l], 2.0),
        random_tensor(rng, &[c], 1.5),
        random_tensor(rng, &[c], 1.0),
    ];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap();
        project(t, y, seed)
    })
}

/// Inputs are kept away from the kink at zero.
pub fn relu(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let inputs = [away_from_zero(rng, &[3, 2, 5])];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })
}

pub fn maxpool1d(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let size = rng.gen_range(1..4);
    let len = rng.gen_range(size..13);
    let inputs = [distinct_values(rng, &[2, 2, len])];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.maxpool1d(v[0], size).unwrap();
        project(t, y, seed)
    })
}

pub fn global_avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let len = rng.gen_range(1..9);
    let inputs = [random_tensor(rng, &[2, 3, len], 1.0)];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        project(t, y, seed)
    })
}

pub fn dense(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
    let inputs = [
        random_tensor(rng, &[b, i], 1.0),
        random_tensor(rng, &[i, o], 1.0),
        random_tensor(rng, &[o], 1.0),
    ];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.dense(v[0], v[1], v[2]).unwrap();
        project(t, y, seed)
    })
}

pub fn flatten_concat(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let extra = rng.gen_range(1..5);
    let inputs = [
        random_tensor(rng, &[2, 2, 3], 1.0),
        random_tensor(rng, &[2, extra], 1.0),
    ];
    gradcheck(&inputs, 200, |t, v| {
        let flat = t.reshape(v[0], &[2, 6]).unwrap();
        let y = t.concat(flat, v[1]).unwrap();
        project(t, y, seed)
    })
}

/// Temperature-scaled softmax and log-softmax.
pub fn softmax(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let temp = rng.gen_range(0.5..10.0);
    let cols = rng.gen_range(2..6);
    let inputs = [random_tensor(rng, &[3, cols], 3.0)];
    let a = gradcheck(&inputs, 200, |t, v| {
        let y = t.softmax(v[0], temp).unwrap();
        project(t, y, seed)
    });
    let b = gradcheck(&inputs, 200, |t, v| {
        let y = t.log_softmax(v[0], temp).unwrap();
        project(t, y, seed)
    });
    merge(a, b)
}

fn random_distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        data.extend(w.into_iter().map(|x| x / s));
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Both cross-entropy entry points, gradients flowing into target and logits.
pub fn cross_entropy(rng: &mut ChaCha8Rng, _: u64) -> GradCheck {
    let c = rng.gen_range(2..6);
    let temp = rng.gen_range(0.5..10.0);
    let inputs = [random_distribution(rng, 3, c), random_tensor(rng, &[3, c], 3.0)];
    let target = inputs[0].clone();
    let a = gradcheck(&inputs, 200, |t, v| {
        let q = t.softmax(v[1], temp).unwrap();
        t.cross_entropy(v[0], q).unwrap()
    });
    let b = gradcheck(&inputs[1..], 200, |t, v| {
        let lq = t.log_softmax(v[0], temp).unwrap();
        t.cross_entropy_log(target.clone(), lq).unwrap()
    });
    merge(a, b)
}

pub fn mse(rng: &mut ChaCha8Rng, _: u64) -> GradCheck {
    let shape = [rng.gen_range(1..4), rng.gen_range(1..8)];
    let inputs = [random_tensor(rng, &shape, 2.0), random_tensor(rng, &shape, 2.0)];
    gradcheck(&inputs, 200, |t, v| t.mse(v[0], v[1]).unwrap())
}

pub fn linear(rng: &mut ChaCha8Rng, seed: u64) -> GradCheck {
    let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let inputs = [random_tensor(rng, &[2, 4], 1.0), random_tensor(rng, &[2, 4], 1.0)];
    gradcheck(&inputs, 200, |t, v| {
        let y = t.linear(&[(v[0], a), (v[1], b), (v[0], 0.5)]).unwrap();
        project(t, y, seed)
    })
}
