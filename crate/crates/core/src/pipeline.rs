//! End-to-end stages: data preparation, teacher training, distillation,
//! GATN training with optional β search, and evaluation on both halves.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{
    best_by_count, select_surrogate, surrogate_source, train_gatn, AttackConfig, AttackRun, Provenance,
    SurrogateSource, BETA_GRID, DEFAULT_ALPHA, DEFAULT_TARGET_CLASS,
};
use crate::data::{apply_label_map, preprocess_dataset, remap_labels, stratified_split, Dataset, SplitPair};
use crate::distill::{
    teacher_outputs, train_student, BoxMode, DistillConfig, DistilledStudent, Teacher, TeacherKind, TeacherOutputs,
};
use crate::dtw::Dtw1nn;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, generalization_eval, AttackReport, Criterion, SplitKind};
use crate::models::{build_fcn, train_classifier, ArchitectureConfig, DEFAULT_GATN_HIDDEN};
use crate::nn::{Architecture, TrainConfig, TrainedModel};

/// Optimizer settings without a seed; seeds come from [`Seeds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Hyper {
    pub fn with_seed(self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub teacher: u64,
    pub student: u64,
    pub gatn: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            split: 0,
            teacher: 1,
            student: 2,
            gatn: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub teacher_kind: TeacherKind,
    pub box_mode: BoxMode,
    pub alpha: f64,
    /// Fixed β, or `None` to search the grid.
    pub beta: Option<f64>,
    pub target_class: usize,
    pub tau: f64,
    /// Overrides the box-mode preset when set.
    pub gamma: Option<f64>,
    pub gatn_hidden_units: Vec<usize>,
    pub gatn_residual: bool,
    /// Criterion used to rank β values and report.
    pub criterion: Criterion,
    pub seeds: Seeds,
    pub teacher_train: Hyper,
    pub student_train: Hyper,
    pub gatn_train: Hyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let classifier = Hyper {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
        };
        ExperimentConfig {
            teacher_kind: TeacherKind::Fcn,
            box_mode: BoxMode::White,
            alpha: DEFAULT_ALPHA,
            beta: None,
            target_class: DEFAULT_TARGET_CLASS,
            tau: DistillConfig::DEFAULT_TAU,
            gamma: None,
            gatn_hidden_units: DEFAULT_GATN_HIDDEN.to_vec(),
            gatn_residual: false,
            criterion: Criterion::Labeled,
            seeds: Seeds::default(),
            teacher_train: classifier,
            student_train: classifier,
            gatn_train: Hyper {
                epochs: 100,
                ..classifier
            },
        }
    }
}

impl ExperimentConfig {
    pub fn distill_config(&self) -> DistillConfig {
        let mut c = DistillConfig::for_box(self.box_mode, self.student_train.with_seed(self.seeds.student));
        c.tau = self.tau;
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        c
    }

    /// Attack settings; `beta` falls back to the first grid value when unset.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            alpha: self.alpha,
            beta: self.beta.unwrap_or(BETA_GRID[0]),
            target_class: self.target_class,
            box_mode: self.box_mode,
            teacher_kind: self.teacher_kind,
            hidden_units: self.gatn_hidden_units.clone(),
            residual: self.gatn_residual,
            train: self.gatn_train.with_seed(self.seeds.gatn),
            init_seed: self.seeds.gatn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attack_config().validate()?;
        self.distill_config().validate()
    }
}

/// Remaps train labels, maps test labels onto the same classes, and brings
/// both to a common length (the longest row of either file).
pub fn prepare_data(train_raw: Dataset, test_raw: Dataset, znorm: bool) -> Result<(Dataset, Dataset)> {
    let train = remap_labels(train_raw)?;
    let test = apply_label_map(test_raw, &train.classes)?;
    let longest = train
        .series
        .iter()
        .chain(&test.series)
        .map(|s| s.len())
        .max()
        .ok_or_else(|| Error::Empty("dataset".into()))?;
    Ok((
        preprocess_dataset(&train, Some(longest), znorm)?,
        preprocess_dataset(&test, Some(longest), znorm)?,
    ))
}

/// A trained teacher in storable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TeacherArtifact {
    Fcn(TrainedModel),
    /// 1-NN DTW is its reference set.
    Dtw1nn(Dataset),
}

const TEACHER_MAGIC: [u8; 8] = *b"TSADVTCH";

impl TeacherArtifact {
    pub fn kind(&self) -> TeacherKind {
        match self {
            TeacherArtifact::Fcn(_) => TeacherKind::Fcn,
            TeacherArtifact::Dtw1nn(_) => TeacherKind::Dtw1nn,
        }
    }

    pub fn to_teacher(&self) -> Result<Teacher> {
        match self {
            TeacherArtifact::Fcn(m) => Teacher::fcn(m.clone()),
            TeacherArtifact::Dtw1nn(d) => Ok(Teacher::dtw1nn(Dtw1nn::new(d.clone())?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        bincode::serialize_into(&mut w, &TEACHER_MAGIC)?;
        bincode::serialize_into(&mut w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let magic: [u8; 8] = bincode::deserialize_from(&mut r)?;
        if magic != TEACHER_MAGIC {
            return Err(Error::Serde(format!("{} is not a teacher file", path.display())));
        }
        Ok(bincode::deserialize_from(&mut r)?)
    }
}

pub fn train_teacher(kind: TeacherKind, train: &Dataset, hyper: Hyper, seed: u64) -> Result<TeacherArtifact> {
    match kind {
        TeacherKind::Fcn => {
            let len = train
                .series_len()
                .ok_or_else(|| Error::Empty("teacher training set".into()))?;
            let cfg = ArchitectureConfig::classifier(Architecture::Fcn, len, train.num_classes());
            let model = train_classifier(build_fcn(&cfg, seed)?, train, &hyper.with_seed(seed))?;
            Ok(TeacherArtifact::Fcn(model))
        }
        TeacherKind::Dtw1nn => {
            train.labels()?;
            Ok(TeacherArtifact::Dtw1nn(train.clone()))
        }
    }
}

/// Teacher outputs on `D_eval` and the distilled student, unless the attack
/// uses the teacher itself. Student training sees `D_eval` without labels.
pub fn distill_stage(
    config: &ExperimentConfig,
    teacher: &Teacher,
    d_eval: &Dataset,
) -> Result<Option<(TeacherOutputs, DistilledStudent)>> {
    if surrogate_source(config.box_mode, config.teacher_kind) == SurrogateSource::Teacher {
        return Ok(None);
    }
    let unlabeled = d_eval.unlabeled();
    let outputs = teacher_outputs(teacher, &unlabeled.inputs(), config.box_mode.teacher_mode())?;
    let student = train_student(&unlabeled, &outputs, &config.distill_config(), config.seeds.student)?;
    Ok(Some((outputs, student)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub runs: Vec<AttackRun>,
    /// `D_eval` report per run, same order.
    pub reports: Vec<AttackReport>,
    pub best: usize,
}

impl AttackOutcome {
    pub fn best_run(&self) -> &AttackRun {
        &self.runs[self.best]
    }
}

/// Trains one GATN (fixed β) or one per grid value on `xs`. Needs neither
/// labels nor the teacher.
pub fn train_attacks(
    config: &ExperimentConfig,
    surrogate: &TrainedModel,
    source: SurrogateSource,
    xs: &[&[f64]],
    provenance: &Provenance,
) -> Result<Vec<AttackRun>> {
    let base = config.attack_config();
    let betas = match config.beta {
        Some(b) => vec![b],
        None => BETA_GRID.to_vec(),
    };
    betas
        .into_iter()
        .map(|beta| {
            let cfg = AttackConfig { beta, ..base.clone() };
            train_gatn(&cfg, surrogate.clone(), source, xs, provenance.clone())
        })
        .collect()
}

/// Scores each run against the teacher on `D_eval` and picks the best.
pub fn score_attacks(
    config: &ExperimentConfig,
    runs: Vec<AttackRun>,
    teacher: &Teacher,
    d_eval: &Dataset,
) -> Result<AttackOutcome> {
    let reports: Vec<AttackReport> = runs
        .iter()
        .map(|run| evaluate_split(run, teacher, d_eval, SplitKind::DEval, config.criterion))
        .collect::<Result<_>>()?;
    let keys: Vec<(usize, f64)> = reports
        .iter()
        .map(|r| (r.num_adversaries, r.mse_adversaries.unwrap_or(f64::INFINITY)))
        .collect();
    Ok(AttackOutcome {
        runs,
        reports,
        best: best_by_count(&keys),
    })
}

pub fn attack_stage(
    config: &ExperimentConfig,
    teacher: &Teacher,
    student: Option<TrainedModel>,
    d_eval: &Dataset,
    provenance: &Provenance,
) -> Result<AttackOutcome> {
    let (surrogate, source) = select_surrogate(&config.attack_config(), teacher, student)?;
    let runs = train_attacks(config, &surrogate, source, &d_eval.inputs(), provenance)?;
    score_attacks(config, runs, teacher, d_eval)
}

/// Proof that restricted runs stayed restricted: counters sampled right
/// after student and GATN training, before any evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub teacher_label_queries: usize,
    pub teacher_soft_queries: usize,
    pub teacher_output_soft_reads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub split: SplitPair,
    pub teacher: TeacherArtifact,
    pub teacher_outputs: Option<TeacherOutputs>,
    pub student: Option<DistilledStudent>,
    pub attack: AttackOutcome,
    pub test_report: AttackReport,
    pub audit: AccessAudit,
}

/// Runs every stage on in-memory data that has already been prepared.
pub fn run_experiment(
    config: &ExperimentConfig,
    name: &str,
    train: &Dataset,
    available: &Dataset,
) -> Result<ExperimentResult> {
    config.validate()?;
    let split = stratified_split(available, config.seeds.split)?;
    let artifact = train_teacher(config.teacher_kind, train, config.teacher_train, config.seeds.teacher)?;
    let teacher = artifact.to_teacher()?;
    let distilled = distill_stage(config, &teacher, &split.d_eval)?;
    let provenance = Provenance {
        dataset: name.to_string(),
        split_seed: split.seed,
        num_train: split.d_eval.len(),
    };
    let student = distilled.as_ref().map(|(_, s)| s.model.clone());
    let (surrogate, source) = select_surrogate(&config.attack_config(), &teacher, student)?;
    // Every GATN is trained on label-free inputs before the teacher is queried
    // again, so the audit reflects training alone.
    let runs = train_attacks(
        config,
        &surrogate,
        source,
        &split.d_eval.unlabeled().inputs(),
        &provenance,
    )?;
    let audit = AccessAudit {
        teacher_label_queries: teacher.label_queries(),
        teacher_soft_queries: teacher.soft_queries(),
        teacher_output_soft_reads: distilled.as_ref().map_or(0, |(o, _)| o.soft_reads()),
    };
    let attack = score_attacks(config, runs, &teacher, &split.d_eval)?;
    let test_report = generalization_eval(attack.best_run(), &teacher, &split.d_test)?;
    let (teacher_outputs, student) = match distilled {
        Some((o, s)) => (Some(o), Some(s)),
        None => (None, None),
    };
    Ok(ExperimentResult {
        split,
        teacher: artifact,
        teacher_outputs,
        student,
        attack,
        test_report,
        audit,
    })
}
