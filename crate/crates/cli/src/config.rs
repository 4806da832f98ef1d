//! Run settings. Built-in defaults are overridden by a TOML file, which is
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tsadv::distill::{BoxMode, TeacherKind};
use tsadv::eval::Criterion;
use tsadv::pipeline::ExperimentConfig;

pub const ARCHIVE_ENV: &str = "UCR_ARCHIVE";

/// Every field is optional so a file and the flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// TOML file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset name, also its directory inside the archive.
    #[arg(long)]
    pub dataset: Option<String>,
    /// UCR archive root holding `<name>/<name>_TRAIN.tsv` (falls back to $UCR_ARCHIVE).
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Teacher training file; overrides the archive lookup.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// File used as the attacker's available data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Field separator; tab for `.tsv`, comma for `.csv` when unset.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Z-normalize every series.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub znorm: Option<bool>,
    /// Output root; artifacts go to `<out>/<dataset>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<TeacherKind>,
    #[arg(long = "box")]
    #[serde(rename = "box")]
    pub box_mode: Option<BoxMode>,
    /// Reranking weight, > 1.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed reconstruction weight instead of the grid search.
    #[arg(long, conflicts_with = "beta_grid")]
    pub beta: Option<f64>,
    /// Search the β grid (the default when no β is given).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub beta_grid: Option<bool>,
    /// Remapped class index the attack pushes towards.
    #[arg(long)]
    pub target_class: Option<usize>,
    /// Distillation temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Imitation weight; defaults to 0.5 (white box) or 1.0 (black box).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// How adversaries are counted: labeled or unlabeled.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    #[arg(long)]
    pub seed_split: Option<u64>,
    #[arg(long)]
    pub seed_teacher: Option<u64>,
    #[arg(long)]
    pub seed_student: Option<u64>,
    #[arg(long)]
    pub seed_gatn: Option<u64>,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    pub student_epochs: Option<usize>,
    #[arg(long)]
    pub gatn_epochs: Option<usize>,
    /// Batch size for every network.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate for every network.
    #[arg(long)]
    pub lr: Option<f64>,
    /// GATN hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub gatn_hidden: Option<Vec<usize>>,
    /// Make the GATN emit `x + g(x, x̃)`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub gatn_residual: Option<bool>,
}

macro_rules! layer {
    ($top:ident, $base:ident; $($f:ident),+) => {
        Settings { config: None, $($f: $top.$f.clone().or($base.$f.clone())),+ }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `self` wins wherever it has a value.
    pub fn over(&self, base: &Settings) -> Settings {
        let mut merged = layer!(self, base;
            dataset, archive, train, test, delimiter, znorm, out, teacher, box_mode, alpha, beta,
            beta_grid, target_class, tau, gamma, criterion, seed_split, seed_teacher, seed_student,
            seed_gatn, teacher_epochs, student_epochs, gatn_epochs, batch_size, lr, gatn_hidden,
            gatn_residual);
        // An explicit choice at one level beats the other kind of choice below it.
        if self.beta.is_some() {
            merged.beta_grid = None;
        } else if self.beta_grid == Some(true) {
            merged.beta = None;
        }
        merged
    }

    /// Layers these flags over the `--config` file, if any.
    pub fn load(&self) -> Result<Settings> {
        match &self.config {
            Some(path) => Ok(self.over(&Settings::from_file(path)?)),
            None => Ok(self.clone()),
        }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let e = self.experiment()?;
        let archive = self
            .archive
            .clone()
            .or_else(|| std::env::var_os(ARCHIVE_ENV).map(PathBuf::from));
        let dataset = match (&self.dataset, &self.train) {
            (Some(d), _) => d.clone(),
            (None, Some(train)) => dataset_name_from(train),
            (None, None) => bail!("no dataset given: pass --dataset or --train"),
        };
        let (train, test) = match (&self.train, &self.test, &archive) {
            (Some(a), Some(b), _) => (Some(a.clone()), Some(b.clone())),
            (None, None, Some(root)) => {
                let dir = root.join(&dataset);
                (
                    Some(dir.join(format!("{dataset}_TRAIN.tsv"))),
                    Some(dir.join(format!("{dataset}_TEST.tsv"))),
                )
            }
            (Some(_), None, _) | (None, Some(_), _) => bail!("--train and --test must be given together"),
            (None, None, None) => (None, None),
        };
        Ok(Resolved {
            dataset,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("runs")),
            train,
            test,
            delimiter: self.delimiter,
            znorm: self.znorm.unwrap_or(false),
            experiment: e,
        })
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut e = ExperimentConfig::default();
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),+) => {
                $(if let Some(v) = self.$src.clone() { e.$($dst).+ = v; })+
            };
        }
        set!(
            teacher => teacher_kind,
            box_mode => box_mode,
            alpha => alpha,
            target_class => target_class,
            tau => tau,
            criterion => criterion,
            seed_split => seeds.split,
            seed_teacher => seeds.teacher,
            seed_student => seeds.student,
            seed_gatn => seeds.gatn,
            teacher_epochs => teacher_train.epochs,
            student_epochs => student_train.epochs,
            gatn_epochs => gatn_train.epochs,
            gatn_hidden => gatn_hidden_units,
            gatn_residual => gatn_residual
        );
        e.gamma = self.gamma;
        e.beta = if self.beta_grid == Some(true) { None } else { self.beta };
        for h in [&mut e.teacher_train, &mut e.student_train, &mut e.gatn_train] {
            if let Some(b) = self.batch_size {
                h.batch_size = b;
            }
            if let Some(lr) = self.lr {
                h.lr = lr;
            }
        }
        e.validate()?;
        Ok(e)
    }
}

/// `Foo_TRAIN.tsv` → `Foo`.
fn dataset_name_from(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_suffix("_TRAIN").unwrap_or(&stem).to_string()
}

/// Fully populated settings, echoed next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub dataset: String,
    pub out: PathBuf,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub delimiter: Option<char>,
    pub znorm: bool,
    pub experiment: ExperimentConfig,
}

impl Resolved {
    pub fn root(&self) -> PathBuf {
        self.out.join(&self.dataset)
    }

    pub fn delimiter_for(&self, path: &Path) -> char {
        self.delimiter
            .unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
                Some("csv") => ',',
                _ => '\t',
            })
    }

    pub fn echo(&self, command: &str) -> Result<()> {
        let root = self.root();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(format!("config.{command}.toml"));
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
