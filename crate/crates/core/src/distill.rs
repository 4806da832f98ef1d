//! Teacher queries and student training by knowledge distillation.
//!
//! A teacher is either a trained FCN or a 1-NN DTW classifier. Its outputs on
//! the attacker's data are computed once into [`TeacherOutputs`]; hard mode
//! keeps predicted labels only, soft mode also keeps a class distribution.
//! Access to anything beyond hard labels is counted so that restricted
//! (black-box) runs can prove they never looked.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dtw::{argmax_first, Dtw1nn};
use crate::error::{Error, Result};
use crate::models::{build_lenet5_1d, dataset_tensor, targets_tensor, ArchitectureConfig};
use crate::nn::{
    cross_entropy, fit, lit, one_hot, softmax_slice, Architecture, Network, Tape, TrainConfig, TrainedModel, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Fcn,
    Dtw1nn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    White,
    Black,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Hard,
    Soft,
}

impl BoxMode {
    /// White-box attackers see class distributions; black-box ones only labels.
    pub fn teacher_mode(self) -> TeacherMode {
        match self {
            BoxMode::White => TeacherMode::Soft,
            BoxMode::Black => TeacherMode::Hard,
        }
    }
}

macro_rules! display_lowercase {
    ($t:ty { $($v:ident => $s:literal),+ }) => {
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($t)
                    ))),
                }
            }
        }
    };
}

display_lowercase!(TeacherKind { Fcn => "fcn", Dtw1nn => "dtw1nn" });
display_lowercase!(BoxMode { White => "white", Black => "black" });
display_lowercase!(TeacherMode { Hard => "hard", Soft => "soft" });

/// The attacked classifier. Queries are counted by kind.
#[derive(Debug)]
pub struct Teacher {
    model: TeacherModel,
    label_queries: AtomicUsize,
    soft_queries: AtomicUsize,
}

#[derive(Debug)]
enum TeacherModel {
    Fcn(TrainedModel),
    Dtw1nn(Dtw1nn),
}

impl Teacher {
    pub fn fcn(model: TrainedModel) -> Result<Self> {
        if model.architecture != Architecture::Fcn {
            return Err(Error::Config(format!(
                "an FCN teacher needs an fcn model, got {}",
                model.architecture
            )));
        }
        Ok(Self::wrap(TeacherModel::Fcn(model)))
    }

    pub fn dtw1nn(classifier: Dtw1nn) -> Self {
        Self::wrap(TeacherModel::Dtw1nn(classifier))
    }

    fn wrap(model: TeacherModel) -> Self {
        Teacher {
            model,
            label_queries: AtomicUsize::new(0),
            soft_queries: AtomicUsize::new(0),
        }
    }

    pub fn kind(&self) -> TeacherKind {
        match self.model {
            TeacherModel::Fcn(_) => TeacherKind::Fcn,
            TeacherModel::Dtw1nn(_) => TeacherKind::Dtw1nn,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.model {
            TeacherModel::Fcn(m) => m.output_len(),
            TeacherModel::Dtw1nn(c) => c.num_classes(),
        }
    }

    /// The underlying network, when the teacher is one. Reading it is a
    /// white-box privilege and counts as a soft query.
    pub fn network(&self) -> Option<&TrainedModel> {
        match &self.model {
            TeacherModel::Fcn(m) => {
                self.soft_queries.fetch_add(1, Ordering::Relaxed);
                Some(m)
            }
            TeacherModel::Dtw1nn(_) => None,
        }
    }

    /// Predicted class labels only.
    pub fn predict_labels(&self, xs: &[&[f64]]) -> Result<Vec<usize>> {
        self.label_queries.fetch_add(xs.len(), Ordering::Relaxed);
        match &self.model {
            TeacherModel::Fcn(m) => m.predict_labels(xs),
            TeacherModel::Dtw1nn(c) => c.predict(xs),
        }
    }

    /// Class distributions (softmax at T=1 for the FCN, Soft-1NN for DTW) and,
    /// for the FCN, the logits.
    pub fn predict_soft(&self, xs: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        self.soft_queries.fetch_add(xs.len().max(1), Ordering::Relaxed);
        match &self.model {
            TeacherModel::Fcn(m) => {
                let p = m.predict(xs, 1.0)?;
                Ok((p.probs, Some(p.logits)))
            }
            TeacherModel::Dtw1nn(c) => Ok((c.predict_soft(xs)?.probs, None)),
        }
    }

    pub fn label_queries(&self) -> usize {
        self.label_queries.load(Ordering::Relaxed)
    }

    pub fn soft_queries(&self) -> usize {
        self.soft_queries.load(Ordering::Relaxed)
    }
}

/// Teacher predictions on a fixed set of inputs, computed once.
#[derive(Debug, Serialize, Deserialize)]
pub struct TeacherOutputs {
    pub mode: TeacherMode,
    pub teacher_kind: TeacherKind,
    hard_labels: Vec<usize>,
    soft_probs: Option<Vec<Vec<f64>>>,
    logits: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    soft_reads: AtomicUsize,
}

impl Clone for TeacherOutputs {
    fn clone(&self) -> Self {
        TeacherOutputs {
            mode: self.mode,
            teacher_kind: self.teacher_kind,
            hard_labels: self.hard_labels.clone(),
            soft_probs: self.soft_probs.clone(),
            logits: self.logits.clone(),
            soft_reads: AtomicUsize::new(self.soft_reads()),
        }
    }
}

impl PartialEq for TeacherOutputs {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.teacher_kind == other.teacher_kind
            && self.hard_labels == other.hard_labels
            && self.soft_probs == other.soft_probs
            && self.logits == other.logits
    }
}

pub fn teacher_outputs(teacher: &Teacher, xs: &[&[f64]], mode: TeacherMode) -> Result<TeacherOutputs> {
    if xs.is_empty() {
        return Err(Error::Empty("teacher inputs".into()));
    }
    let (hard_labels, soft_probs, logits) = match mode {
        TeacherMode::Hard => (teacher.predict_labels(xs)?, None, None),
        TeacherMode::Soft => {
            let (probs, logits) = teacher.predict_soft(xs)?;
            let labels = probs.iter().map(|p| argmax_first(p)).collect();
            (labels, Some(probs), logits)
        }
    };
    Ok(TeacherOutputs {
        mode,
        teacher_kind: teacher.kind(),
        hard_labels,
        soft_probs,
        logits,
        soft_reads: AtomicUsize::new(0),
    })
}

impl TeacherOutputs {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    pub fn hard_labels(&self) -> &[usize] {
        &self.hard_labels
    }

    pub fn soft_probs(&self) -> Option<&[Vec<f64>]> {
        self.soft_reads.fetch_add(1, Ordering::Relaxed);
        self.soft_probs.as_deref()
    }

    pub fn logits(&self) -> Option<&[Vec<f64>]> {
        self.soft_reads.fetch_add(1, Ordering::Relaxed);
        self.logits.as_deref()
    }

    /// How many times distributions or logits were accessed.
    pub fn soft_reads(&self) -> usize {
        self.soft_reads.load(Ordering::Relaxed)
    }

    /// Per-row distillation target: `σ(z_f; τ)` for an FCN in soft mode, the
    /// Soft-1NN distribution as-is for DTW in soft mode, one-hot otherwise.
    pub fn distillation_targets(&self, tau: f64, classes: usize) -> Result<Vec<Vec<f64>>> {
        match (self.mode, self.teacher_kind) {
            (TeacherMode::Hard, _) => Ok(self.one_hot_labels(classes)),
            (TeacherMode::Soft, TeacherKind::Fcn) => {
                let logits = self
                    .logits()
                    .ok_or_else(|| Error::Config("soft FCN outputs carry no logits".into()))?;
                Ok(logits.iter().map(|z| softmax_slice(z, tau)).collect())
            }
            (TeacherMode::Soft, TeacherKind::Dtw1nn) => self
                .soft_probs()
                .map(<[Vec<f64>]>::to_vec)
                .ok_or_else(|| Error::Config("soft outputs carry no distributions".into())),
        }
    }

    pub fn one_hot_labels(&self, classes: usize) -> Vec<Vec<f64>> {
        self.hard_labels.iter().map(|&l| one_hot(l, classes)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the imitation term; the rest goes to the hard-label term.
    pub gamma: f64,
    pub tau: f64,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub const DEFAULT_TAU: f64 = 10.0;

    pub fn white_box(train: TrainConfig) -> Self {
        DistillConfig {
            gamma: 0.5,
            tau: Self::DEFAULT_TAU,
            train,
        }
    }

    pub fn black_box(train: TrainConfig) -> Self {
        DistillConfig {
            gamma: 1.0,
            tau: Self::DEFAULT_TAU,
            train,
        }
    }

    pub fn for_box(mode: BoxMode, train: TrainConfig) -> Self {
        match mode {
            BoxMode::White => Self::white_box(train),
            BoxMode::Black => Self::black_box(train),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// `γ·H(target, σ(z_s; τ)) + (1−γ)·H(y, σ(z_s; 1))` for one sample.
pub fn distill_loss(z_s: &[f64], target: &[f64], y_hard: &[f64], config: &DistillConfig) -> Result<f64> {
    config.validate()?;
    let mut loss = 0.0;
    if config.gamma > 0.0 {
        loss += config.gamma * cross_entropy(target, &softmax_slice(z_s, config.tau))?;
    }
    if config.gamma < 1.0 {
        loss += (1.0 - config.gamma) * cross_entropy(y_hard, &softmax_slice(z_s, 1.0))?;
    }
    Ok(loss)
}

/// Batch version of [`distill_loss`] on a tape; terms with zero weight are
/// not recorded at all.
fn distill_loss_tape(
    tape: &mut Tape<f32>,
    logits: Var,
    targets: &[Vec<f64>],
    hard: &[Vec<f64>],
    idx: &[usize],
    config: &DistillConfig,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if config.gamma > 0.0 {
        let lp = tape.log_softmax(logits, lit(config.tau))?;
        terms.push((
            tape.cross_entropy_log(targets_tensor(targets, idx)?, lp)?,
            lit(config.gamma),
        ));
    }
    if config.gamma < 1.0 {
        let lp = tape.log_softmax(logits, 1.0)?;
        terms.push((
            tape.cross_entropy_log(targets_tensor(hard, idx)?, lp)?,
            lit(1.0 - config.gamma),
        ));
    }
    tape.linear(&terms)
}

/// Fraction of rows where the student's argmax equals the teacher label.
pub fn fidelity(student: &TrainedModel, xs: &[&[f64]], teacher_labels: &[usize]) -> Result<f64> {
    let predicted = student.predict_labels(xs)?;
    Ok(crate::models::accuracy(&predicted, teacher_labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledStudent {
    /// Parameters from the epoch with the highest fidelity.
    pub model: TrainedModel,
    pub fidelity: f64,
    /// Every improvement of the best-so-far fidelity, in order.
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains a LeNet-5 student on `d_eval` inputs against teacher outputs. The
/// hard-label term uses the teacher's predicted labels, so ground truth is
/// never read; passing `d_eval.unlabeled()` is always valid.
pub fn train_student(
    d_eval: &Dataset,
    outputs: &TeacherOutputs,
    config: &DistillConfig,
    seed: u64,
) -> Result<DistilledStudent> {
    config.validate()?;
    d_eval.validate()?;
    if outputs.len() != d_eval.len() {
        return Err(Error::shape("teacher outputs", &[d_eval.len()], &[outputs.len()]));
    }
    let len = d_eval
        .series_len()
        .ok_or_else(|| Error::Empty("student training set".into()))?;
    let classes = d_eval.num_classes();
    let mut model = build_lenet5_1d(
        &ArchitectureConfig::classifier(Architecture::Lenet5, len, classes),
        seed,
    )?;
    let hard = outputs.one_hot_labels(classes);
    let targets = if config.gamma > 0.0 {
        outputs.distillation_targets(config.tau, classes)?
    } else {
        Vec::new()
    };
    let inputs = dataset_tensor(d_eval)?;
    let xs = d_eval.inputs();
    let labels = outputs.hard_labels();
    let mut best: Option<(f64, Network<f32>)> = None;
    let mut checkpoints = Vec::new();
    let log = fit(
        &mut model.network,
        &inputs,
        None,
        &config.train,
        |tape, logits, idx| distill_loss_tape(tape, logits, &targets, &hard, idx, config),
        |epoch, net| {
            let probe = TrainedModel::new(Architecture::Lenet5, net.clone(), seed);
            let f = fidelity(&probe, &xs, labels)?;
            if best.as_ref().is_none_or(|(b, _)| f > *b) {
                best = Some((f, probe.network));
                checkpoints.push(Checkpoint {
                    epoch: epoch + 1,
                    fidelity: f,
                });
            }
            Ok(Some(f))
        },
    )?;
    let (fid, network) = best.ok_or_else(|| Error::Config("student trained for zero epochs".into()))?;
    model.network = network;
    model.rng_seed = config.train.seed;
    model.training_log = log;
    Ok(DistilledStudent {
        model,
        fidelity: fid,
        checkpoints,
    })
}
