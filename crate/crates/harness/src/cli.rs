//! Subcommands of the `ibrar` binary, callable in-process.

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::ExperimentSpec;
use crate::datasets::load_dataset;
use crate::error::{HarnessError, Result};
use crate::report::{emit_report, ReportBundle};
use clap::{Args, Parser, Subcommand};
use ibrar_core::pipeline::{
    alpha_beta_grid, compute_channel_mask, evaluate, score_channels, select_robust_layers, tendency_table, train,
    ConfigSnapshot, MaskScoring, MaskSummary, RobustTemplate, RunReport,
};
use ibrar_core::{Dataset, IbLossConfig, Network};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "ibrar",
    version,
    about = "Information-bottleneck robust training experiments"
)]
pub struct Cli {
    /// Experiment config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Refuse checkpoints trained under a different configuration.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network, evaluate it under the configured attacks and save a checkpoint.
    Train,
    /// Attack a checkpoint and tabulate where the misclassifications go.
    Attack(CheckpointArg),
    /// Natural and adversarial accuracy of a checkpoint.
    Evaluate(CheckpointArg),
    /// One single-layer run per hidden layer against a CE baseline.
    SelectLayers,
    /// Score the last conv block of a checkpoint and save it with the mask attached.
    ComputeMask(CheckpointArg),
    /// Train over the (α = β/10, β) grid.
    Sweep,
    /// Re-emit report files from a saved `report.json`.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

impl Cli {
    pub fn spec(&self) -> Result<ExperimentSpec> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("run.out={}", o.display()));
        }
        overrides.extend(self.overrides.iter().cloned());
        ExperimentSpec::load(self.config.as_deref(), &overrides)
    }
}

/// Parses `argv` (program name first), runs the command and maps the outcome
/// to an exit status: 0 on success, 2 for configuration errors, 1 otherwise.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Worker count from `IBRAR_THREADS`, or all cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var("IBRAR_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(HarnessError::Config(format!(
                "IBRAR_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = thread_count()?;
    // Validate before building anything that costs time.
    let spec = match &cli.command {
        Command::Report { .. } => None,
        _ => Some(cli.spec()?),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match (&cli.command, spec) {
        (Command::Report { input }, _) => cmd_report(input, cli),
        (Command::Train, Some(s)) => cmd_train(&s),
        (Command::Attack(c), Some(s)) => cmd_attack(&s, c, true),
        (Command::Evaluate(c), Some(s)) => cmd_attack(&s, c, false),
        (Command::SelectLayers, Some(s)) => cmd_select(&s, threads),
        (Command::ComputeMask(c), Some(s)) => cmd_mask(&s, c),
        (Command::Sweep, Some(s)) => cmd_sweep(&s),
        (_, None) => unreachable!("spec is parsed for every command but report"),
    })
}

fn load_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let (train_set, test_set) = load_dataset(&spec.data)?;
    info!(
        "data: {} train, {} test, shape {:?}",
        train_set.len(),
        test_set.len(),
        train_set.image_shape()
    );
    Ok((train_set, test_set))
}

fn meta(spec: &ExperimentSpec, epochs: usize) -> CheckpointMeta {
    CheckpointMeta {
        seed: spec.seed,
        epoch: epochs as u32,
        config_hash: spec.config_hash(),
    }
}

fn open_checkpoint(spec: &ExperimentSpec, arg: &CheckpointArg) -> Result<Network> {
    let hash = spec.config_hash();
    let ck = load_checkpoint(&arg.checkpoint, arg.strict.then_some(&hash))?;
    if ck.network.config().input != spec.network.input {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {:?} inputs but the dataset has {:?}",
            ck.network.config().input,
            spec.network.input
        )));
    }
    Ok(ck.network)
}

fn snapshot(spec: &ExperimentSpec, net: &Network) -> ConfigSnapshot {
    ConfigSnapshot {
        network: net.config().to_text(),
        train: spec.train.clone(),
        ib: spec.ib.clone(),
        adv: spec.adv.clone(),
    }
}

/// One full training run: train, evaluate, save checkpoint and reports into `out`.
fn train_run(spec: &ExperimentSpec, train_set: &Dataset, test_set: &Dataset, out: &Path) -> Result<RunReport> {
    let net = Network::new(spec.network.clone(), spec.seed)?;
    let outcome = train(net, train_set, Some(test_set), &spec.train, &spec.ib, &spec.adv)?;
    let mut report = outcome.report;
    report.label = spec.label.clone();
    report.absorb(evaluate(
        &outcome.network,
        test_set,
        &spec.attacks,
        spec.eval.batch_size,
        spec.seed,
    )?);
    info!(
        "{}: natural {:.2}%{}",
        report.label,
        report.natural_accuracy.unwrap_or(f64::NAN),
        report
            .adversarial
            .iter()
            .map(|a| format!(", {} {:.2}%", a.attack, a.accuracy))
            .collect::<String>()
    );
    save_checkpoint(
        &outcome.network,
        &meta(spec, spec.train.epochs),
        &out.join("model.ckpt"),
    )?;
    let bundle = ReportBundle {
        runs: vec![report.clone()],
        info_plane: vec![outcome.info_plane],
        class_names: spec.eval.class_names.clone(),
        ..ReportBundle::default()
    };
    emit_report(&bundle, out, &spec.formats)?;
    Ok(report)
}

fn cmd_train(spec: &ExperimentSpec) -> Result<()> {
    let (train_set, test_set) = load_data(spec)?;
    train_run(spec, &train_set, &test_set, &spec.out)?;
    Ok(())
}

fn cmd_attack(spec: &ExperimentSpec, arg: &CheckpointArg, tendency: bool) -> Result<()> {
    let (_, test_set) = load_data(spec)?;
    let net = open_checkpoint(spec, arg)?;
    let eval = evaluate(&net, &test_set, &spec.attacks, spec.eval.batch_size, spec.seed)?;
    let mut report = RunReport {
        label: spec.label.clone(),
        seed: spec.seed,
        config: snapshot(spec, &net),
        epochs: Vec::new(),
        natural_accuracy: None,
        adversarial: Vec::new(),
        mask: net.mask().map(MaskSummary::of),
        wall_clock_secs: 0.0,
    };
    report.absorb(eval);
    let tendency = match (tendency, spec.attacks.first()) {
        (true, Some(a)) => Some(tendency_table(
            &net,
            &test_set,
            a,
            spec.eval.top_k,
            spec.eval.batch_size,
            spec.seed,
        )?),
        _ => None,
    };
    let bundle = ReportBundle {
        runs: vec![report],
        tendency,
        class_names: spec.eval.class_names.clone(),
        ..ReportBundle::default()
    };
    emit_report(&bundle, &spec.out, &spec.formats)?;
    Ok(())
}

fn cmd_select(spec: &ExperimentSpec, threads: usize) -> Result<()> {
    let (train_set, test_set) = load_data(spec)?;
    let attack = spec
        .attacks
        .first()
        .ok_or_else(|| HarnessError::Config("select-layers needs at least one attack in attack.list".into()))?;
    let template = RobustTemplate {
        network: spec.network.clone(),
        train: spec.train.clone(),
        ib: spec.ib.clone(),
    };
    let sel = select_robust_layers(&template, &train_set, &test_set, attack, spec.select_margin, threads)?;
    info!("selected layers {:?}", sel.selected);
    let bundle = ReportBundle {
        layers: Some(sel),
        ..ReportBundle::default()
    };
    emit_report(&bundle, &spec.out, &spec.formats)?;
    Ok(())
}

#[derive(Serialize)]
struct MaskFile<'a> {
    scores: &'a [f64],
    mask: MaskSummary,
}

fn cmd_mask(spec: &ExperimentSpec, arg: &CheckpointArg) -> Result<()> {
    let (train_set, _) = load_data(spec)?;
    let mut net = open_checkpoint(spec, arg)?;
    let scoring = MaskScoring {
        batches: spec.train.mask_batches,
        batch_size: spec.train.batch_size,
        fraction: spec.train.mask_fraction,
        kernel_t: spec.ib.kernel_t,
        kernel_y: spec.ib.kernel_y,
    };
    // Scores and mask come from the same draw of batches.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scores = score_channels(&net, &train_set, &scoring, &mut rng.clone())?;
    let mask = compute_channel_mask(&net, &train_set, &scoring, &mut rng)?;
    info!("removed channels {:?} (threshold {})", mask.removed(), mask.threshold());
    let file = MaskFile {
        scores: &scores,
        mask: MaskSummary::of(&mask),
    };
    fs::create_dir_all(&spec.out).map_err(|e| HarnessError::io(&spec.out, e))?;
    let json = serde_json::to_string_pretty(&file).map_err(|e| HarnessError::Report(e.to_string()))?;
    let path = spec.out.join("mask.json");
    fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))?;
    net.set_mask(mask)?;
    save_checkpoint(&net, &meta(spec, 0), &spec.out.join("masked.ckpt"))
}

fn cmd_sweep(spec: &ExperimentSpec) -> Result<()> {
    let (train_set, test_set) = load_data(spec)?;
    let runs = alpha_beta_grid(&spec.sweep_betas)
        .into_iter()
        .enumerate()
        .map(|(i, (alpha, beta))| {
            let mut s = spec.clone();
            s.ib = IbLossConfig {
                alpha,
                beta,
                ..spec.ib.clone()
            };
            s.seed = spec.seed + i as u64;
            s.train.seed = s.seed;
            s.label = format!("{}-beta{beta}", spec.label);
            s.out = spec.out.join(format!("run_{i}"));
            s
        })
        .collect::<Vec<_>>();
    let reports = runs
        .par_iter()
        .map(|s| train_run(s, &train_set, &test_set, &s.out))
        .collect::<Result<Vec<_>>>()?;
    let bundle = ReportBundle {
        runs: reports,
        class_names: spec.eval.class_names.clone(),
        ..ReportBundle::default()
    };
    let formats = crate::config::Formats {
        png: false,
        ..spec.formats.clone()
    };
    emit_report(&bundle, &spec.out, &formats)?;
    Ok(())
}

fn cmd_report(input: &Path, cli: &Cli) -> Result<()> {
    let bundle = crate::report::read_bundle(input)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    let formats = crate::config::Formats {
        csv: true,
        json: true,
        png: true,
    };
    emit_report(&bundle, &out, &formats)?;
    Ok(())
}
