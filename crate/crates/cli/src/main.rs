use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use tsadv::eval::SplitKind;
use tsadv::stats::Alternative;
use tsadv_cli::config::{Resolved, Settings};
use tsadv_cli::stages::{self, Outcome, BENCHMARK_DATASETS, VARIANTS};

/// Adversarial attacks on time series classifiers via distilled surrogates.
#[derive(Parser)]
#[command(name = "tsadv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, normalize and split a dataset.
    Prepare(Settings),
    /// Train the target classifier on the training file.
    TrainTeacher(Settings),
    /// Distill a student from teacher outputs on the evaluation split.
    Distill(Settings),
    /// Train attack networks and pick the best β.
    Attack(Settings),
    /// Score the chosen attack on both splits.
    Evaluate(Settings),
    /// Every stage for one variant.
    Run(Settings),
    /// Every variant on many archive datasets, then the report.
    Batch {
        #[command(flatten)]
        settings: Settings,
        /// Dataset names; the benchmark list when omitted.
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<String>>,
    },
    /// Summary tables and pairwise signed-rank tests over all evaluated runs.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Split the comparisons are computed on.
        #[arg(long, default_value = "d_eval")]
        split: SplitKind,
        /// two-sided, greater or less; one-sided tests ask whether the first variant is larger.
        #[arg(long, default_value = "two-sided")]
        alternative: Alternative,
    },
}

fn say(stage: &str, cfg: &Resolved, outcome: Outcome) {
    let e = &cfg.experiment;
    let status = match outcome {
        Outcome::Ran => "done",
        Outcome::UpToDate => "up to date",
    };
    eprintln!("{} [{}-{}] {stage}: {status}", cfg.dataset, e.box_mode, e.teacher_kind);
}

fn stage(name: &str, settings: &Settings, f: fn(&Resolved) -> Result<Outcome>) -> Result<()> {
    let cfg = settings.load()?.resolve()?;
    let outcome = f(&cfg)?;
    cfg.echo(name)?;
    say(name, &cfg, outcome);
    Ok(())
}

fn run(cfg: &Resolved) -> Result<()> {
    for (name, outcome) in stages::run_all(cfg)? {
        say(name, cfg, outcome);
    }
    cfg.echo("run")
}

fn print_report(out: &std::path::Path, split: SplitKind, alternative: Alternative) -> Result<()> {
    for c in stages::report(out, split, alternative)? {
        println!(
            "{} on {}, {} ({} datasets)",
            c.metric,
            c.split,
            c.alternative,
            c.datasets.len()
        );
        for t in &c.tests {
            match &t.result {
                Some(r) => println!("  {} vs {}: p = {:.4} (n = {})", t.first, t.second, r.p_value, r.n),
                None => println!("  {} vs {}: {}", t.first, t.second, t.note.as_deref().unwrap_or("NA")),
            }
        }
    }
    eprintln!("report written to {}", out.join("report").display());
    Ok(())
}

fn batch(settings: &Settings, datasets: Option<Vec<String>>) -> Result<()> {
    let base = settings.load()?;
    if base.train.is_some() || base.test.is_some() {
        bail!("batch reads datasets from the archive; drop --train/--test");
    }
    let names = datasets.unwrap_or_else(|| BENCHMARK_DATASETS.iter().map(|s| s.to_string()).collect());
    let mut completed = 0;
    for name in &names {
        for (b, k) in VARIANTS {
            let one = Settings {
                dataset: Some(name.clone()),
                box_mode: Some(b),
                teacher: Some(k),
                ..Settings::default()
            }
            .over(&base);
            let cfg = one.resolve()?;
            let missing: Vec<_> = [&cfg.train, &cfg.test]
                .into_iter()
                .flatten()
                .filter(|p| !p.exists())
                .collect();
            if cfg.train.is_none() || !missing.is_empty() {
                eprintln!("warning: skipping {name}: missing {:?}", missing);
                break;
            }
            run(&cfg)?;
            completed += 1;
        }
    }
    if completed == 0 {
        bail!(
            "no dataset could be run; check --archive or ${}",
            tsadv_cli::config::ARCHIVE_ENV
        );
    }
    print_report(
        &base.out.unwrap_or_else(|| PathBuf::from("runs")),
        SplitKind::DEval,
        Alternative::TwoSided,
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(s) => stage("prepare", &s, stages::prepare),
        Command::TrainTeacher(s) => stage("train-teacher", &s, stages::train_teacher_cmd),
        Command::Distill(s) => stage("distill", &s, stages::distill_cmd),
        Command::Attack(s) => stage("attack", &s, stages::attack_cmd),
        Command::Evaluate(s) => stage("evaluate", &s, stages::evaluate_cmd),
        Command::Run(s) => run(&s.load()?.resolve()?),
        Command::Batch { settings, datasets } => batch(&settings, datasets),
        Command::Report {
            out,
            split,
            alternative,
        } => print_report(&out, split, alternative),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
