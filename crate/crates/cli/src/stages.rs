//! Pipeline stages backed by files under `<out>/<dataset>/`.
//!
//! ```text
//! data/                      train.json  split.json  manifest.json
//! teacher-<kind>/            teacher.bin
//! <box>-<kind>/distill/      student.bin  teacher_outputs.json  distill.json  audit.json
//! <box>-<kind>/attack/       run-<i>.bin  d_eval_reports.json  selection.json
//! <box>-<kind>/evaluate/     reports.json  reports.csv  plot_data.csv
//! ```
//!
//! Every stage directory holds a `stage.json` with a hash over its
//! parameters and upstream hashes; a stage whose hash and outputs are already
//! present is skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tsadv::attack::{select_surrogate, surrogate_source, AttackRun, Provenance, SurrogateSource};
use tsadv::data::{load_ucr, stratified_split, Dataset, SplitPair};
use tsadv::distill::{BoxMode, Teacher, TeacherKind};
use tsadv::eval::{
    evaluate_split, generalization_eval, write_plot_data, write_reports_csv, write_reports_json, AttackReport,
    SplitKind,
};
use tsadv::nn::TrainedModel;
use tsadv::pipeline::{
    distill_stage, prepare_data, score_attacks, train_attacks, train_teacher, AccessAudit, Seeds, TeacherArtifact,
};
use tsadv::stats::{pairwise_wilcoxon, Alternative};

use crate::config::Resolved;

/// What a stage did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub hash: String,
    pub upstream: Vec<String>,
    pub seeds: Seeds,
    pub params: Value,
    pub outputs: Vec<String>,
    pub note: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_hash(stage: &str, params: &Value, upstream: &[String]) -> String {
    let doc = json!({ "stage": stage, "params": params, "upstream": upstream });
    sha256_hex(&serde_json::to_vec(&doc).expect("json value serializes"))
}

const RECORD: &str = "stage.json";

fn read_record(dir: &Path, what: &str, command: &str) -> Result<StageRecord> {
    let path = dir.join(RECORD);
    if !path.exists() {
        bail!("missing {what} in {}; run `tsadv {command}` first", dir.display());
    }
    read_json(&path)
}

fn current(dir: &Path, hash: &str) -> bool {
    match read_json::<StageRecord>(&dir.join(RECORD)) {
        Ok(r) => r.hash == hash && r.outputs.iter().all(|o| dir.join(o).exists()),
        Err(_) => false,
    }
}

fn write_record(dir: &Path, record: &StageRecord) -> Result<()> {
    write_json(&dir.join(RECORD), record)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).with_context(|| format!("writing {}", path.display()))
}

fn write_bincode<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    bincode::serialize_into(BufWriter::new(f), value).with_context(|| format!("writing {}", path.display()))
}

fn read_bincode<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    bincode::deserialize_from(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Directory names for one dataset.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &Resolved) -> Self {
        Layout { root: cfg.root() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn teacher(&self, kind: TeacherKind) -> PathBuf {
        self.root.join(format!("teacher-{kind}"))
    }

    pub fn variant(&self, box_mode: BoxMode, kind: TeacherKind) -> PathBuf {
        self.root.join(format!("{box_mode}-{kind}"))
    }

    pub fn distill(&self, box_mode: BoxMode, kind: TeacherKind) -> PathBuf {
        self.variant(box_mode, kind).join("distill")
    }

    pub fn attack(&self, box_mode: BoxMode, kind: TeacherKind) -> PathBuf {
        self.variant(box_mode, kind).join("attack")
    }

    pub fn evaluate(&self, box_mode: BoxMode, kind: TeacherKind) -> PathBuf {
        self.variant(box_mode, kind).join("evaluate")
    }
}

/// Counts and identities of one prepared split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub train_file: PathBuf,
    pub test_file: PathBuf,
    pub series_len: usize,
    /// Raw labels; position is the remapped class index.
    pub classes: Vec<i64>,
    pub split_seed: u64,
    pub train_class_counts: Vec<usize>,
    pub d_eval_class_counts: Vec<usize>,
    pub d_test_class_counts: Vec<usize>,
    /// Row numbers in the test file.
    pub d_eval_rows: Vec<usize>,
    pub d_test_rows: Vec<usize>,
}

pub fn prepare(cfg: &Resolved) -> Result<Outcome> {
    let (Some(train_path), Some(test_path)) = (&cfg.train, &cfg.test) else {
        bail!("no input files: pass --train and --test, or --archive (or set $UCR_ARCHIVE)");
    };
    let read = |p: &Path| std::fs::read(p).with_context(|| format!("reading {}", p.display()));
    let (train_bytes, test_bytes) = (read(train_path)?, read(test_path)?);
    let seed = cfg.experiment.seeds.split;
    let params = json!({
        "dataset": cfg.dataset,
        "train_sha256": sha256_hex(&train_bytes),
        "test_sha256": sha256_hex(&test_bytes),
        "delimiters": [cfg.delimiter_for(train_path).to_string(), cfg.delimiter_for(test_path).to_string()],
        "znorm": cfg.znorm,
        "split_seed": seed,
    });
    let hash = stage_hash("prepare", &params, &[]);
    let dir = Layout::new(cfg).data();
    if current(&dir, &hash) {
        return Ok(Outcome::UpToDate);
    }
    let train_raw = load_ucr(train_path, cfg.delimiter_for(train_path))?;
    let test_raw = load_ucr(test_path, cfg.delimiter_for(test_path))?;
    let (mut train, mut available) = prepare_data(train_raw, test_raw, cfg.znorm)?;
    train.name.clone_from(&cfg.dataset);
    available.name.clone_from(&cfg.dataset);
    let split = stratified_split(&available, seed)?;
    let manifest = Manifest {
        dataset: cfg.dataset.clone(),
        train_file: train_path.clone(),
        test_file: test_path.clone(),
        series_len: train.series_len().unwrap_or(0),
        classes: train.classes.clone(),
        split_seed: seed,
        train_class_counts: train.class_counts(),
        d_eval_class_counts: split.d_eval.class_counts(),
        d_test_class_counts: split.d_test.class_counts(),
        d_eval_rows: split.d_eval.series.iter().map(|s| s.source_id).collect(),
        d_test_rows: split.d_test.series.iter().map(|s| s.source_id).collect(),
    };
    mkdir(&dir)?;
    write_json(&dir.join("train.json"), &train)?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_record(
        &dir,
        &StageRecord {
            stage: "prepare".into(),
            hash,
            upstream: vec![],
            seeds: cfg.experiment.seeds,
            params,
            outputs: vec!["train.json".into(), "split.json".into(), "manifest.json".into()],
            note: None,
        },
    )?;
    Ok(Outcome::Ran)
}

struct Prepared {
    hash: String,
    train: Dataset,
    split: SplitPair,
}

fn load_prepared(layout: &Layout) -> Result<Prepared> {
    let dir = layout.data();
    let rec = read_record(&dir, "prepared data", "prepare")?;
    Ok(Prepared {
        hash: rec.hash,
        train: read_json(&dir.join("train.json"))?,
        split: read_json(&dir.join("split.json"))?,
    })
}

pub fn train_teacher_cmd(cfg: &Resolved) -> Result<Outcome> {
    let layout = Layout::new(cfg);
    let data = load_prepared(&layout)?;
    let e = &cfg.experiment;
    let params = json!({
        "teacher": e.teacher_kind,
        "train": e.teacher_train,
        "seed": e.seeds.teacher,
    });
    let hash = stage_hash("train-teacher", &params, std::slice::from_ref(&data.hash));
    let dir = layout.teacher(e.teacher_kind);
    if current(&dir, &hash) {
        return Ok(Outcome::UpToDate);
    }
    let artifact = train_teacher(e.teacher_kind, &data.train, e.teacher_train, e.seeds.teacher)?;
    mkdir(&dir)?;
    artifact.save(&dir.join("teacher.bin"))?;
    write_record(
        &dir,
        &StageRecord {
            stage: "train-teacher".into(),
            hash,
            upstream: vec![data.hash],
            seeds: e.seeds,
            params,
            outputs: vec!["teacher.bin".into()],
            note: None,
        },
    )?;
    Ok(Outcome::Ran)
}

fn load_teacher(layout: &Layout, kind: TeacherKind) -> Result<(String, Teacher)> {
    let dir = layout.teacher(kind);
    let rec = read_record(
        &dir,
        &format!("{kind} teacher"),
        &format!("train-teacher --teacher {kind}"),
    )?;
    let artifact = TeacherArtifact::load(&dir.join("teacher.bin"))?;
    Ok((rec.hash, artifact.to_teacher()?))
}

pub fn distill_cmd(cfg: &Resolved) -> Result<Outcome> {
    let layout = Layout::new(cfg);
    let e = &cfg.experiment;
    let data = load_prepared(&layout)?;
    let (teacher_hash, teacher) = load_teacher(&layout, e.teacher_kind)?;
    let dc = e.distill_config();
    let params = json!({
        "box": e.box_mode,
        "teacher": e.teacher_kind,
        "gamma": dc.gamma,
        "tau": dc.tau,
        "train": e.student_train,
        "seed": e.seeds.student,
    });
    let upstream = vec![data.hash, teacher_hash];
    let hash = stage_hash("distill", &params, &upstream);
    let dir = layout.distill(e.box_mode, e.teacher_kind);
    if current(&dir, &hash) {
        return Ok(Outcome::UpToDate);
    }
    mkdir(&dir)?;
    let mut record = StageRecord {
        stage: "distill".into(),
        hash,
        upstream,
        seeds: e.seeds,
        params,
        outputs: vec![],
        note: None,
    };
    match distill_stage(e, &teacher, &data.split.d_eval)? {
        None => {
            record.note = Some("the attack differentiates through the teacher; no student is trained".into());
        }
        Some((outputs, student)) => {
            let audit = AccessAudit {
                teacher_label_queries: teacher.label_queries(),
                teacher_soft_queries: teacher.soft_queries(),
                teacher_output_soft_reads: outputs.soft_reads(),
            };
            student.model.save(&dir.join("student.bin"))?;
            outputs.save(&dir.join("teacher_outputs.json"))?;
            write_json(
                &dir.join("distill.json"),
                &json!({ "fidelity": student.fidelity, "checkpoints": student.checkpoints }),
            )?;
            write_json(&dir.join("audit.json"), &audit)?;
            record.outputs = ["student.bin", "teacher_outputs.json", "distill.json", "audit.json"]
                .map(String::from)
                .to_vec();
        }
    }
    write_record(&dir, &record)?;
    Ok(Outcome::Ran)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub betas: Vec<f64>,
    pub best: usize,
    pub best_beta: f64,
    pub surrogate: SurrogateSource,
}

pub fn attack_cmd(cfg: &Resolved) -> Result<Outcome> {
    let layout = Layout::new(cfg);
    let e = &cfg.experiment;
    let data = load_prepared(&layout)?;
    let (_, teacher) = load_teacher(&layout, e.teacher_kind)?;
    let ddir = layout.distill(e.box_mode, e.teacher_kind);
    let drec = read_record(
        &ddir,
        &format!("{}-{} distillation", e.box_mode, e.teacher_kind),
        &format!("distill --box {} --teacher {}", e.box_mode, e.teacher_kind),
    )?;
    let ac = e.attack_config();
    let params = json!({
        "alpha": ac.alpha,
        "beta": e.beta,
        "target_class": ac.target_class,
        "hidden": ac.hidden_units,
        "residual": ac.residual,
        "train": e.gatn_train,
        "seed": e.seeds.gatn,
        "criterion": e.criterion,
    });
    let hash = stage_hash("attack", &params, std::slice::from_ref(&drec.hash));
    let dir = layout.attack(e.box_mode, e.teacher_kind);
    if current(&dir, &hash) {
        return Ok(Outcome::UpToDate);
    }
    let student = match surrogate_source(e.box_mode, e.teacher_kind) {
        SurrogateSource::Teacher => None,
        SurrogateSource::Student => Some(TrainedModel::load(&ddir.join("student.bin"))?),
    };
    let (surrogate, source) = select_surrogate(&ac, &teacher, student)?;
    let d_eval = &data.split.d_eval;
    let provenance = Provenance {
        dataset: cfg.dataset.clone(),
        split_seed: data.split.seed,
        num_train: d_eval.len(),
    };
    let runs = train_attacks(e, &surrogate, source, &d_eval.unlabeled().inputs(), &provenance)?;
    let outcome = score_attacks(e, runs, &teacher, d_eval)?;
    mkdir(&dir)?;
    let mut outputs = Vec::new();
    for (i, run) in outcome.runs.iter().enumerate() {
        let name = format!("run-{i}.bin");
        write_bincode(&dir.join(&name), run)?;
        outputs.push(name);
    }
    write_reports_json(&dir.join("d_eval_reports.json"), &outcome.reports)?;
    let selection = Selection {
        betas: outcome.runs.iter().map(|r| r.config.beta).collect(),
        best: outcome.best,
        best_beta: outcome.best_run().config.beta,
        surrogate: source,
    };
    write_json(&dir.join("selection.json"), &selection)?;
    outputs.extend(["d_eval_reports.json".to_string(), "selection.json".to_string()]);
    write_record(
        &dir,
        &StageRecord {
            stage: "attack".into(),
            hash,
            upstream: vec![drec.hash],
            seeds: e.seeds,
            params,
            outputs,
            note: None,
        },
    )?;
    Ok(Outcome::Ran)
}

pub fn evaluate_cmd(cfg: &Resolved) -> Result<Outcome> {
    let layout = Layout::new(cfg);
    let e = &cfg.experiment;
    let adir = layout.attack(e.box_mode, e.teacher_kind);
    let arec = read_record(
        &adir,
        &format!("{}-{} attack runs", e.box_mode, e.teacher_kind),
        &format!("attack --box {} --teacher {}", e.box_mode, e.teacher_kind),
    )?;
    let params = json!({ "criterion": e.criterion });
    let hash = stage_hash("evaluate", &params, std::slice::from_ref(&arec.hash));
    let dir = layout.evaluate(e.box_mode, e.teacher_kind);
    if current(&dir, &hash) {
        return Ok(Outcome::UpToDate);
    }
    let data = load_prepared(&layout)?;
    let (_, teacher) = load_teacher(&layout, e.teacher_kind)?;
    let selection: Selection = read_json(&adir.join("selection.json"))?;
    let run: AttackRun = read_bincode(&adir.join(format!("run-{}.bin", selection.best)))?;
    let eval_report = evaluate_split(&run, &teacher, &data.split.d_eval, SplitKind::DEval, e.criterion)?;
    let test_report = generalization_eval(&run, &teacher, &data.split.d_test)?;
    let reports = [eval_report, test_report];
    mkdir(&dir)?;
    write_reports_json(&dir.join("reports.json"), &reports)?;
    write_reports_csv(&dir.join("reports.csv"), &reports)?;
    write_plot_data(&dir.join("plot_data.csv"), &reports)?;
    write_record(
        &dir,
        &StageRecord {
            stage: "evaluate".into(),
            hash,
            upstream: vec![arec.hash],
            seeds: e.seeds,
            params,
            outputs: ["reports.json", "reports.csv", "plot_data.csv"]
                .map(String::from)
                .to_vec(),
            note: None,
        },
    )?;
    Ok(Outcome::Ran)
}

/// The four attack variants in comparison-table order.
pub const VARIANTS: [(BoxMode, TeacherKind); 4] = [
    (BoxMode::Black, TeacherKind::Dtw1nn),
    (BoxMode::White, TeacherKind::Dtw1nn),
    (BoxMode::Black, TeacherKind::Fcn),
    (BoxMode::White, TeacherKind::Fcn),
];

/// Every per-variant report under `out`, sorted by dataset then variant.
pub fn collect_reports(out: &Path) -> Result<Vec<AttackReport>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
    let mut datasets: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    datasets.sort();
    for root in datasets {
        let layout = Layout { root };
        for (b, k) in VARIANTS {
            let path = layout.evaluate(b, k).join("reports.json");
            if path.exists() {
                found.extend(tsadv::eval::read_reports_json(&path)?);
            }
        }
    }
    Ok(found)
}

/// One comparison matrix: per-variant samples over datasets and the pairwise tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub split: SplitKind,
    pub alternative: Alternative,
    pub datasets: Vec<String>,
    pub samples: BTreeMap<String, Vec<Option<f64>>>,
    pub tests: Vec<tsadv::stats::PairwiseEntry>,
}

pub fn compare(reports: &[AttackReport], split: SplitKind, metric: &str, alternative: Alternative) -> Comparison {
    let value = |r: &AttackReport| match metric {
        "num_adversaries" => Some(r.num_adversaries as f64),
        _ => r.mse_adversaries,
    };
    let mut datasets: Vec<String> = reports
        .iter()
        .filter(|r| r.split == split)
        .map(|r| r.dataset.clone())
        .collect();
    datasets.sort();
    datasets.dedup();
    let mut samples = Vec::new();
    for (b, k) in VARIANTS {
        let column: Vec<Option<f64>> = datasets
            .iter()
            .map(|d| {
                reports
                    .iter()
                    .find(|r| r.split == split && &r.dataset == d && r.box_mode == b && r.teacher_kind == k)
                    .and_then(value)
            })
            .collect();
        samples.push((format!("{b}-{k}"), column));
    }
    let numeric: Vec<(String, Vec<f64>)> = samples
        .iter()
        .map(|(n, v)| (n.clone(), v.iter().map(|x| x.unwrap_or(f64::NAN)).collect()))
        .collect();
    Comparison {
        metric: metric.into(),
        split,
        alternative,
        datasets,
        tests: pairwise_wilcoxon(&numeric, alternative),
        samples: samples.into_iter().collect(),
    }
}

fn write_matrix_csv(path: &Path, c: &Comparison) -> Result<()> {
    let mut text = String::from("first,second,pairs,w_plus,w_minus,statistic,p_value,method,note\n");
    for t in &c.tests {
        match &t.result {
            Some(r) => {
                text += &format!(
                    "{},{},{},{},{},{},{:e},{:?},{}\n",
                    t.first,
                    t.second,
                    r.n,
                    r.w_plus,
                    r.w_minus,
                    r.statistic,
                    r.p_value,
                    r.method,
                    r.warning.clone().unwrap_or_default()
                )
            }
            None => {
                text += &format!(
                    "{},{},,,,,,,\"{}\"\n",
                    t.first,
                    t.second,
                    t.note.clone().unwrap_or_default().replace('"', "'")
                )
            }
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Aggregates every evaluated variant under `out` into `<out>/report/`.
pub fn report(out: &Path, split: SplitKind, alternative: Alternative) -> Result<Vec<Comparison>> {
    let reports = collect_reports(out)?;
    if reports.is_empty() {
        bail!(
            "no evaluation reports under {}; run `tsadv evaluate` first",
            out.display()
        );
    }
    let dir = out.join("report");
    mkdir(&dir)?;
    write_reports_json(&dir.join("summary.json"), &reports)?;
    write_reports_csv(&dir.join("summary.csv"), &reports)?;
    write_plot_data(&dir.join("plot_data.csv"), &reports)?;
    let comparisons: Vec<Comparison> = ["num_adversaries", "mse_adversaries"]
        .iter()
        .map(|m| compare(&reports, split, m, alternative))
        .collect();
    for c in &comparisons {
        write_json(&dir.join(format!("wilcoxon_{}.json", c.metric)), c)?;
        write_matrix_csv(&dir.join(format!("wilcoxon_{}.csv", c.metric)), c)?;
    }
    Ok(comparisons)
}

/// Runs every stage for the configured variant.
pub fn run_all(cfg: &Resolved) -> Result<Vec<(&'static str, Outcome)>> {
    Ok(vec![
        ("prepare", prepare(cfg)?),
        ("train-teacher", train_teacher_cmd(cfg)?),
        ("distill", distill_cmd(cfg)?),
        ("attack", attack_cmd(cfg)?),
        ("evaluate", evaluate_cmd(cfg)?),
    ])
}

/// The 42 UCR datasets of the original study.
pub const BENCHMARK_DATASETS: [&str; 42] = [
    "Car",
    "ChlorineConcentration",
    "CinCECGTorso",
    "Earthquakes",
    "ECG200",
    "ECG5000",
    "ECGFiveDays",
    "FordA",
    "FordB",
    "InsectWingbeatSound",
    "ItalyPowerDemand",
    "Lightning2",
    "Lightning7",
    "MoteStrain",
    "NonInvasiveFetalECGThorax1",
    "NonInvasiveFetalECGThorax2",
    "Phoneme",
    "Plane",
    "SonyAIBORobotSurface1",
    "SonyAIBORobotSurface2",
    "StarLightCurves",
    "Trace",
    "TwoLeadECG",
    "Wafer",
    "AllGestureWiimoteX",
    "AllGestureWiimoteY",
    "AllGestureWiimoteZ",
    "DodgerLoopDay",
    "DodgerLoopGame",
    "DodgerLoopWeekend",
    "EOGHorizontalSignal",
    "EOGVerticalSignal",
    "FreezerRegularTrain",
    "FreezerSmallTrain",
    "Fungi",
    "GesturePebbleZ1",
    "GesturePebbleZ2",
    "PickupGestureWiimoteZ",
    "PigAirwayPressure",
    "PigArtPressure",
    "PigCVP",
    "ShakeGestureWiimoteZ",
];
