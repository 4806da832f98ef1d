//! Adversary counting, perturbation size, and report files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackRun;
use crate::data::Dataset;
use crate::distill::{BoxMode, Teacher, TeacherKind};
use crate::error::{Error, Result};
use crate::nn::l2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    DEval,
    DTest,
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::DEval => "d_eval",
            SplitKind::DTest => "d_test",
        })
    }
}

/// How a sample qualifies as an adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Clean prediction matches ground truth and the adversarial one differs.
    Labeled,
    /// The teacher's clean prediction stands in for ground truth.
    Unlabeled,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Labeled => "labeled",
            Criterion::Unlabeled => "unlabeled",
        })
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "labeled" => Ok(Criterion::Labeled),
            "unlabeled" => Ok(Criterion::Unlabeled),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_eval" | "eval" => Ok(SplitKind::DEval),
            "d_test" | "test" => Ok(SplitKind::DTest),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Everything in a report that does not come from counting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub dataset: String,
    pub box_mode: BoxMode,
    pub teacher_kind: TeacherKind,
    pub alpha: f64,
    pub beta: f64,
    pub target_class: usize,
    pub split: SplitKind,
}

impl ReportContext {
    pub fn for_run(run: &AttackRun, split: SplitKind) -> Self {
        ReportContext {
            dataset: run.provenance.dataset.clone(),
            box_mode: run.config.box_mode,
            teacher_kind: run.config.teacher_kind,
            alpha: run.config.alpha,
            beta: run.config.beta,
            target_class: run.config.target_class,
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub dataset: String,
    pub box_mode: BoxMode,
    pub teacher_kind: TeacherKind,
    pub alpha: f64,
    pub beta: f64,
    pub target_class: usize,
    pub split: SplitKind,
    pub criterion: Criterion,
    pub num_samples: usize,
    pub num_adversaries: usize,
    /// Mean per-sample MSE over counted adversaries; `None` when there are none.
    pub mse_adversaries: Option<f64>,
    /// Mean per-sample MSE over every evaluated sample.
    pub mse_all: f64,
    pub adversary_indices: Vec<usize>,
}

impl AttackReport {
    /// Short label of the attack variant, e.g. `white-fcn`.
    pub fn variant(&self) -> String {
        format!("{}-{}", self.box_mode, self.teacher_kind)
    }
}

fn check_pairs(xs: &[&[f64]], x_hats: &[Vec<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty("evaluation samples".into()));
    }
    if xs.len() != x_hats.len() {
        return Err(Error::shape("adversarial samples", &[xs.len()], &[x_hats.len()]));
    }
    for (x, h) in xs.iter().zip(x_hats) {
        if x.len() != h.len() {
            return Err(Error::shape("adversarial sample", &[x.len()], &[h.len()]));
        }
    }
    Ok(())
}

fn build_report(
    ctx: &ReportContext,
    criterion: Criterion,
    xs: &[&[f64]],
    x_hats: &[Vec<f64>],
    counted: Vec<usize>,
) -> Result<AttackReport> {
    let mse: Vec<f64> = xs.iter().zip(x_hats).map(|(x, h)| l2(x, h)).collect::<Result<_>>()?;
    let mse_all = mse.iter().sum::<f64>() / mse.len() as f64;
    let mse_adversaries =
        (!counted.is_empty()).then(|| counted.iter().map(|&i| mse[i]).sum::<f64>() / counted.len() as f64);
    Ok(AttackReport {
        dataset: ctx.dataset.clone(),
        box_mode: ctx.box_mode,
        teacher_kind: ctx.teacher_kind,
        alpha: ctx.alpha,
        beta: ctx.beta,
        target_class: ctx.target_class,
        split: ctx.split,
        criterion,
        num_samples: xs.len(),
        num_adversaries: counted.len(),
        mse_adversaries,
        mse_all,
        adversary_indices: counted,
    })
}

/// Counts `i` iff `teacher(x_i) = y_i` and `teacher(x̂_i) ≠ teacher(x_i)`.
pub fn count_adversaries_labeled(
    teacher: &Teacher,
    xs: &[&[f64]],
    x_hats: &[Vec<f64>],
    y_true: &[usize],
    ctx: &ReportContext,
) -> Result<AttackReport> {
    check_pairs(xs, x_hats)?;
    if y_true.len() != xs.len() {
        return Err(Error::shape("ground-truth labels", &[xs.len()], &[y_true.len()]));
    }
    let clean = teacher.predict_labels(xs)?;
    let adv = predict_hat(teacher, x_hats)?;
    let counted = (0..xs.len())
        .filter(|&i| clean[i] == y_true[i] && adv[i] != clean[i])
        .collect();
    build_report(ctx, Criterion::Labeled, xs, x_hats, counted)
}

/// Counts `i` iff `teacher(x̂_i) ≠ teacher(x_i)`.
pub fn count_adversaries_unlabeled(
    teacher: &Teacher,
    xs: &[&[f64]],
    x_hats: &[Vec<f64>],
    ctx: &ReportContext,
) -> Result<AttackReport> {
    check_pairs(xs, x_hats)?;
    let pseudo = teacher.predict_labels(xs)?;
    let adv = predict_hat(teacher, x_hats)?;
    let counted = (0..xs.len()).filter(|&i| adv[i] != pseudo[i]).collect();
    build_report(ctx, Criterion::Unlabeled, xs, x_hats, counted)
}

fn predict_hat(teacher: &Teacher, x_hats: &[Vec<f64>]) -> Result<Vec<usize>> {
    let refs: Vec<&[f64]> = x_hats.iter().map(Vec::as_slice).collect();
    teacher.predict_labels(&refs)
}

/// Generates adversaries for `dataset` with a trained run and counts them.
pub fn evaluate_split(
    run: &AttackRun,
    teacher: &Teacher,
    dataset: &Dataset,
    split: SplitKind,
    criterion: Criterion,
) -> Result<AttackReport> {
    let xs = dataset.inputs();
    let generated = run.generate(&xs)?;
    let ctx = ReportContext::for_run(run, split);
    match criterion {
        Criterion::Labeled => count_adversaries_labeled(teacher, &xs, &generated.x_hat, &dataset.labels()?, &ctx),
        Criterion::Unlabeled => count_adversaries_unlabeled(teacher, &xs, &generated.x_hat, &ctx),
    }
}

/// Applies a run trained on `D_eval` to the unseen `D_test` split without any
/// retraining, verifying that neither network changed.
pub fn generalization_eval(run: &AttackRun, teacher: &Teacher, d_test: &Dataset) -> Result<AttackReport> {
    let fingerprint = |run: &AttackRun| -> Vec<u32> {
        [&run.gatn.network, &run.surrogate.network]
            .iter()
            .flat_map(|n| n.params().iter().chain(n.buffers()).flatten())
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let before = fingerprint(run);
    let report = evaluate_split(run, teacher, d_test, SplitKind::DTest, Criterion::Labeled)?;
    if fingerprint(run) != before {
        return Err(Error::Config("parameters changed during held-out evaluation".into()));
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    dataset: &'a str,
    variant: String,
    box_mode: String,
    teacher: String,
    alpha: f64,
    beta: f64,
    target_class: usize,
    split: String,
    criterion: String,
    num_samples: usize,
    num_adversaries: usize,
    mse_adversaries: String,
    mse_all: f64,
}

/// One row per report, in the per-dataset table layout. A missing
/// adversary MSE is written as `NA`.
pub fn write_reports_csv(path: &Path, reports: &[AttackReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.serialize(CsvRow {
            dataset: &r.dataset,
            variant: r.variant(),
            box_mode: r.box_mode.to_string(),
            teacher: r.teacher_kind.to_string(),
            alpha: r.alpha,
            beta: r.beta,
            target_class: r.target_class,
            split: r.split.to_string(),
            criterion: r.criterion.to_string(),
            num_samples: r.num_samples,
            num_adversaries: r.num_adversaries,
            mse_adversaries: r.mse_adversaries.map_or("NA".into(), |v| format!("{v:?}")),
            mse_all: r.mse_all,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bar-chart data: dataset, variant, split, count and adversary MSE.
pub fn write_plot_data(path: &Path, reports: &[AttackReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["dataset", "variant", "split", "num_adversaries", "mse_adversaries"])
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.variant(),
            r.split.to_string(),
            r.num_adversaries.to_string(),
            r.mse_adversaries.map_or("NA".into(), |v| format!("{v:?}")),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_reports_json(path: &Path, reports: &[AttackReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, reports)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_json(path: &Path) -> Result<Vec<AttackReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}
