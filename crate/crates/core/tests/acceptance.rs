//! End-to-end acceptance checks, one test per criterion. Each test writes a
//! `PASS criterion N` or `FAIL criterion N` line straight to stdout so the
//! summary is visible without `--nocapture`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::layers::{self, TOLERANCE};
use common::{bumps, dtw_by_enumeration, italy_power_demand, random_matrix, wilcoxon_by_enumeration};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsadv::attack::{rerank, select_surrogate, surrogate_source, train_gatn, Provenance, SurrogateSource};
use tsadv::data::{stratified_split, Dataset};
use tsadv::distill::{teacher_outputs, train_student, BoxMode, DistillConfig, TeacherKind};
use tsadv::dtw::{dtw_distance, nn1_classify, soft_1nn};
use tsadv::eval::Criterion;
use tsadv::models::accuracy;
use tsadv::pipeline::{
    distill_stage, run_experiment, train_attacks, train_teacher, ExperimentConfig, ExperimentResult, Hyper,
    TeacherArtifact,
};
use tsadv::stats::wilcoxon_signed_rank;

/// Runs `check`, reports the outcome on stdout, and re-raises any failure.
fn criterion(n: u32, what: &str, limit: Duration, check: impl FnOnce() -> String) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).and_then(|detail| {
        let took = start.elapsed();
        if took <= limit {
            Ok(detail)
        } else {
            Err(Box::new(format!("took {took:.1?}, limit {limit:?}")) as Box<dyn std::any::Any + Send>)
        }
    });
    let took = start.elapsed().as_secs_f64();
    let mut out = std::io::stdout().lock();
    match &outcome {
        Ok(detail) => writeln!(out, "PASS criterion {n}: {what} [{detail}] ({took:.1}s)"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            writeln!(out, "FAIL criterion {n}: {what} [{msg}] ({took:.1}s)")
        }
    }
    .unwrap();
    drop(out);
    if let Err(e) = outcome {
        resume_unwind(e);
    }
}

fn hyper(epochs: usize) -> Hyper {
    Hyper {
        epochs,
        batch_size: 128,
        lr: 1e-3,
    }
}

#[test]
fn criterion_01_dtw_oracle() {
    criterion(
        1,
        "DTW equals warping-path enumeration",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let q: Vec<f64> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let c: Vec<f64> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(-3.0..3.0)).collect();
                worst = worst.max((dtw_distance(&q, &c).unwrap() - dtw_by_enumeration(&q, &c)).abs());
                assert_eq!(dtw_distance(&q, &q).unwrap(), 0.0);
            }
            assert!(worst < 1e-9, "max deviation {worst:e}");
            assert!((dtw_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
            assert!((dtw_distance(&[1.0, 2.0, 3.0], &[2.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
            format!("200 pairs, max deviation {worst:.1e}")
        },
    );
}

#[test]
fn criterion_02_soft_1nn() {
    criterion(2, "Soft-1NN argmax equals 1-NN", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = 0;
        for _ in 0..1000 {
            let v = random_matrix(&mut rng);
            let soft = soft_1nn(&v).unwrap();
            assert_eq!(soft.labels, nn1_classify(&v));
            for p in &soft.probs {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            rows += soft.labels.len();
        }
        format!("1000 matrices, {rows} rows agree")
    });
}

#[test]
fn criterion_03_gradient_checks() {
    criterion(
        3,
        "layer and loss gradients match finite differences",
        Duration::from_secs(60),
        || {
            let mut worst: f64 = 0.0;
            for (kind, case) in layers::CASES {
                let e = layers::worst_error(kind, case);
                assert!(e < TOLERANCE, "{kind}: max relative error {e:e}");
                worst = worst.max(e);
            }
            format!(
                "{} kinds x {} instances, max relative error {worst:.1e}",
                layers::CASES.len(),
                layers::INSTANCES
            )
        },
    );
}

#[test]
fn criterion_04_rerank() {
    criterion(
        4,
        "reranking puts the target class on top",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..1000 {
                let k = rng.gen_range(2..=10);
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                let y: Vec<f64> = raw.iter().map(|v| v / sum).collect();
                let t = rng.gen_range(0..k);
                let alpha = 1.0 + rng.gen_range(f64::EPSILON..=2.0);
                let r = rerank(&y, t, alpha).unwrap();
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(r.iter().enumerate().all(|(j, &v)| j == t || v < r[t]));
            }
            let r = rerank(&[0.7, 0.3], 1, 1.5).unwrap();
            assert!((r[0] - 0.4).abs() <= 1e-12 && (r[1] - 0.6).abs() <= 1e-12);
            "1000 distributions, fixed case [0.4, 0.6]".into()
        },
    );
}

#[test]
fn criterion_05_distillation_fidelity() {
    criterion(
        5,
        "LeNet-5 student mimics FCN teacher",
        Duration::from_secs(300),
        || {
            let (train, available) = bumps(32, 64, 128, 5);
            let split = stratified_split(&available, 0).unwrap();
            assert_eq!(split.d_eval.len(), 64);
            let artifact = train_teacher(TeacherKind::Fcn, &train, hyper(200), 1).unwrap();
            let TeacherArtifact::Fcn(model) = &artifact else {
                unreachable!()
            };
            let train_acc = accuracy(
                &model.predict_labels(&train.inputs()).unwrap(),
                &train.labels().unwrap(),
            );
            assert!(train_acc >= 0.95, "teacher train accuracy {train_acc}");
            let teacher = artifact.to_teacher().unwrap();
            let mut detail = format!("teacher acc {train_acc:.3}");
            for box_mode in [BoxMode::White, BoxMode::Black] {
                let dcfg = DistillConfig::for_box(box_mode, hyper(200).with_seed(2));
                let d_eval = split.d_eval.unlabeled();
                let outputs = teacher_outputs(&teacher, &d_eval.inputs(), box_mode.teacher_mode()).unwrap();
                let student = train_student(&d_eval, &outputs, &dcfg, 2).unwrap();
                assert!(
                    student.fidelity >= 0.9,
                    "gamma {}: fidelity {}",
                    dcfg.gamma,
                    student.fidelity
                );
                detail += &format!(", gamma {} fidelity {:.3}", dcfg.gamma, student.fidelity);
            }
            detail
        },
    );
}

/// The two desk-scale white-box FCN runs: a bump toy set and ItalyPowerDemand.
fn end_to_end_runs() -> Vec<(String, ExperimentResult)> {
    let bumps_cfg = ExperimentConfig {
        teacher_train: hyper(100),
        gatn_train: hyper(50),
        ..ExperimentConfig::default()
    };
    let italy_cfg = ExperimentConfig {
        teacher_train: hyper(100),
        gatn_train: hyper(30),
        ..ExperimentConfig::default()
    };
    let (b_train, b_available) = bumps(32, 64, 128, 6);
    let (i_train, i_available) = italy_power_demand();
    vec![
        (
            "bumps".to_string(),
            run_experiment(&bumps_cfg, "bumps", &b_train, &b_available).unwrap(),
        ),
        (
            "ItalyPowerDemand".to_string(),
            run_experiment(&italy_cfg, "ItalyPowerDemand", &i_train, &i_available).unwrap(),
        ),
    ]
}

fn first_runs() -> &'static Vec<(String, ExperimentResult)> {
    static RUNS: OnceLock<Vec<(String, ExperimentResult)>> = OnceLock::new();
    RUNS.get_or_init(end_to_end_runs)
}

#[test]
fn criterion_06_end_to_end_attack() {
    criterion(
        6,
        "white-box FCN attack finds adversaries on d_eval and d_test",
        Duration::from_secs(1200),
        || {
            let mut detail = Vec::new();
            for (name, r) in first_runs() {
                let best = &r.attack.reports[r.attack.best];
                assert_eq!(r.attack.runs.len(), 5, "{name}: grid size");
                assert_eq!(best.criterion, Criterion::Labeled);
                assert_eq!(r.attack.best_run().surrogate_source, SurrogateSource::Teacher);
                assert!(best.num_adversaries >= 1, "{name}: no d_eval adversaries");
                assert!(r.test_report.num_adversaries >= 1, "{name}: no d_test adversaries");
                assert_eq!(r.test_report.beta, best.beta);
                detail.push(format!(
                    "{name}: beta {:.0e}, d_eval {}/{}, d_test {}/{}",
                    best.beta,
                    best.num_adversaries,
                    best.num_samples,
                    r.test_report.num_adversaries,
                    r.test_report.num_samples
                ));
            }
            detail.join("; ")
        },
    );
}

#[test]
fn criterion_07_surrogate_routing() {
    criterion(
        7,
        "GATN trains on the teacher only for white-box FCN",
        Duration::from_secs(120),
        || {
            let (train, available) = bumps(32, 32, 32, 7);
            let split = stratified_split(&available, 0).unwrap();
            let xs = split.d_eval.inputs();
            let mut seen = Vec::new();
            for kind in [TeacherKind::Fcn, TeacherKind::Dtw1nn] {
                let artifact = train_teacher(kind, &train, hyper(10), 1).unwrap();
                for box_mode in [BoxMode::White, BoxMode::Black] {
                    let teacher = artifact.to_teacher().unwrap();
                    let cfg = ExperimentConfig {
                        box_mode,
                        teacher_kind: kind,
                        beta: Some(1e-2),
                        student_train: hyper(5),
                        gatn_train: hyper(1),
                        ..ExperimentConfig::default()
                    };
                    let student = distill_stage(&cfg, &teacher, &split.d_eval)
                        .unwrap()
                        .map(|(_, s)| s.model);
                    let direct = (box_mode, kind) == (BoxMode::White, TeacherKind::Fcn);
                    assert_eq!(student.is_none(), direct, "{box_mode}/{kind}: distillation");
                    let (surrogate, source) = select_surrogate(&cfg.attack_config(), &teacher, student).unwrap();
                    assert_eq!(source, surrogate_source(box_mode, kind));
                    let prov = Provenance {
                        dataset: "bumps".into(),
                        split_seed: 0,
                        num_train: xs.len(),
                    };
                    let run = train_gatn(&cfg.attack_config(), surrogate, source, &xs, prov).unwrap();
                    let on_teacher = run.surrogate_source == SurrogateSource::Teacher;
                    assert_eq!(on_teacher, direct, "{box_mode}/{kind}");
                    if let Some(net) = teacher.network() {
                        assert_eq!(run.surrogate == *net, direct, "{box_mode}/{kind}: surrogate weights");
                    }
                    seen.push(format!(
                        "{box_mode}/{kind}->{}",
                        if on_teacher { "teacher" } else { "student" }
                    ));
                }
            }
            seen.join(", ")
        },
    );
}

fn flip_labels(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    let c = d.num_classes();
    for s in &mut out.series {
        let l = (s.label.unwrap() + 1) % c;
        s.label = Some(l);
        s.raw_label = d.classes[l];
    }
    out
}

#[test]
fn criterion_08_black_box_hygiene() {
    criterion(
        8,
        "black-box training sees only hard teacher labels",
        Duration::from_secs(300),
        || {
            let (train, available) = bumps(32, 32, 64, 8);
            let split = stratified_split(&available, 0).unwrap();
            let flipped = flip_labels(&split.d_eval);
            let mut detail = Vec::new();
            for kind in [TeacherKind::Fcn, TeacherKind::Dtw1nn] {
                let artifact = train_teacher(kind, &train, hyper(30), 1).unwrap();
                let cfg = ExperimentConfig {
                    box_mode: BoxMode::Black,
                    teacher_kind: kind,
                    beta: Some(1e-3),
                    student_train: hyper(20),
                    gatn_train: hyper(5),
                    ..ExperimentConfig::default()
                };
                let prov = Provenance {
                    dataset: "bumps".into(),
                    split_seed: 0,
                    num_train: split.d_eval.len(),
                };
                let mut trained = Vec::new();
                for d_eval in [&split.d_eval, &flipped] {
                    let teacher = artifact.to_teacher().unwrap();
                    let (outputs, student) = distill_stage(&cfg, &teacher, d_eval).unwrap().unwrap();
                    let runs = train_attacks(
                        &cfg,
                        &student.model,
                        SurrogateSource::Student,
                        &d_eval.unlabeled().inputs(),
                        &prov,
                    )
                    .unwrap();
                    assert_eq!(teacher.soft_queries(), 0, "{kind}: teacher probabilities queried");
                    assert_eq!(outputs.soft_reads(), 0, "{kind}: stored probabilities read");
                    assert!(outputs.soft_probs().is_none() && outputs.logits().is_none());
                    assert_eq!(teacher.label_queries(), d_eval.len());
                    trained.push((student, runs));
                }
                assert!(
                    trained[0] == trained[1],
                    "{kind}: ground-truth labels influenced training"
                );

                let result = run_experiment(&cfg, "bumps", &train, &available).unwrap();
                assert_eq!(result.audit.teacher_soft_queries, 0);
                assert_eq!(result.audit.teacher_output_soft_reads, 0);
                detail.push(format!(
                    "{kind}: {} hard-label queries, 0 soft",
                    result.audit.teacher_label_queries
                ));
            }
            // The counters are live: a white-box DTW run does read probabilities.
            let white = ExperimentConfig {
                box_mode: BoxMode::White,
                teacher_kind: TeacherKind::Dtw1nn,
                beta: Some(1e-3),
                student_train: hyper(5),
                gatn_train: hyper(1),
                ..ExperimentConfig::default()
            };
            let control = run_experiment(&white, "bumps", &train, &available).unwrap();
            assert!(control.audit.teacher_soft_queries > 0 && control.audit.teacher_output_soft_reads > 0);
            detail.push("labels flipped: identical students and GATNs".into());
            detail.join("; ")
        },
    );
}

#[test]
fn criterion_09_wilcoxon() {
    criterion(
        9,
        "signed-rank p-values match sign enumeration",
        Duration::from_secs(10),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut worst: f64 = 0.0;
            let mut cases = 0;
            for n in 5..=10 {
                for _ in 0..100 {
                    let mut mags: Vec<f64> = (1..=n).map(|k| k as f64 + rng.gen_range(0.0..0.9)).collect();
                    mags.shuffle(&mut rng);
                    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
                    let a: Vec<f64> = b
                        .iter()
                        .zip(&mags)
                        .map(|(b, m)| if rng.gen_bool(0.5) { b + m } else { b - m })
                        .collect();
                    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                    let p = wilcoxon_signed_rank(&a, &b).unwrap().p_value;
                    worst = worst.max((p - wilcoxon_by_enumeration(&d)).abs());
                    cases += 1;
                }
            }
            assert!(worst <= 1e-12, "max deviation {worst:e}");
            let fixed = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
            assert_eq!(fixed.p_value, 0.0625);
            format!("{cases} samples n=5..10, max deviation {worst:.1e}, fixed case 0.0625")
        },
    );
}

fn artifact_bytes(r: &ExperimentResult, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let path = dir.join("teacher.bin");
    r.teacher.save(&path).unwrap();
    out.push(std::fs::read(&path).unwrap());
    for (i, run) in r.attack.runs.iter().enumerate() {
        let path = dir.join(format!("gatn{i}.bin"));
        run.gatn.save(&path).unwrap();
        out.push(std::fs::read(&path).unwrap());
    }
    out
}

#[test]
fn criterion_10_determinism() {
    criterion(
        10,
        "repeated end-to-end runs are bit-identical",
        Duration::from_secs(1200),
        || {
            let first = first_runs();
            let second = end_to_end_runs();
            let dir = tempfile::tempdir().unwrap();
            let mut files = 0;
            for ((name, a), (_, b)) in first.iter().zip(&second) {
                let counts = |r: &ExperimentResult| {
                    let mut c: Vec<usize> = r.attack.reports.iter().map(|r| r.num_adversaries).collect();
                    c.push(r.test_report.num_adversaries);
                    c
                };
                assert_eq!(counts(a), counts(b), "{name}: adversary counts");
                assert_eq!(a.attack.best, b.attack.best, "{name}: best beta");
                let (x, y) = (artifact_bytes(a, dir.path()), artifact_bytes(b, dir.path()));
                assert!(x == y, "{name}: model files differ");
                files += x.len();
            }
            format!("{files} model files identical, counts identical")
        },
    );
}
