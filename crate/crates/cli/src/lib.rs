//! Command-line front end for data-free class-incremental experiments.

pub mod config;
pub mod export;
pub mod overrides;
pub mod report;
pub mod run;
pub mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dfcil_core::datasets::SplitTag;

use crate::config::{Ablation, ExperimentConfig};

/// Exit status 2: bad arguments, config or missing inputs. Exit status 1: the
/// run started and failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] dfcil_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dfcil", version, about = "Data-free class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train through a task schedule and write a run directory.
    Run(RunArgs),
    /// Tabulate and plot per-task accuracy of finished runs.
    Report(ReportArgs),
    /// Write eval-mode features of real and synthetic images to CSV.
    ExportEmbeddings(ExportArgs),
    /// Expand a grid of overrides into one config file per point.
    Sweep(SweepArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Dataset preset name, looked up as `<data root>/<name>.npz`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Explicit dataset file or directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory holding `<name>.npz` files [env: DFCIL_DATA_ROOT].
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Classes per task, e.g. `2,2,2,2`.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Vec<usize>,
    #[arg(long)]
    pub order_seed: Option<u64>,
    /// Ablation switches; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub synthesis_iters: Option<usize>,
    #[arg(long)]
    pub images_per_class: Option<usize>,
    /// Subsample the training split to this many images per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Parent of the run directory [env: DFCIL_OUTPUT_ROOT].
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Save PNG grids of every synthetic batch.
    #[arg(long)]
    pub dump_synthetic: bool,
    /// Any config key, e.g. `--set synthesis.alpha_cn=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose real images are exported.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitTag,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<usize>,
    /// Replay files (`synthetic/task_<t>.bin`) whose images are exported.
    #[arg(long)]
    pub replay: Vec<PathBuf>,
    #[arg(long, default_value = "embeddings.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Axis `key=v1,v2,...`; repeat for a product.
    #[arg(long, required = true)]
    pub grid: Vec<String>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> Result<SplitTag, String> {
    SplitTag::ALL
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| format!("unknown split '{s}' (train, val, test)"))
}

fn base_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(CliError::usage),
        None => Ok(ExperimentConfig::default()),
    }
}

/// File, then `--set` overrides, then typed flags.
pub fn resolve_run_config(a: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let base = base_config(a.config.as_ref())?;
    let sets = a
        .set
        .iter()
        .map(|s| overrides::parse_assignment(s))
        .collect::<dfcil_core::Result<Vec<_>>>()
        .map_err(CliError::usage)?;
    let mut cfg = overrides::apply(&base, &sets).map_err(CliError::usage)?;
    if let Some(n) = &a.name {
        cfg.name = n.clone();
    }
    if let Some(d) = &a.dataset {
        cfg.dataset.name = Some(d.clone());
        if a.data.is_none() {
            cfg.dataset.path = None;
        }
    }
    if let Some(p) = &a.data {
        cfg.dataset.path = Some(p.clone());
    }
    if !a.schedule.is_empty() {
        cfg.schedule.classes_per_task = a.schedule.clone();
    }
    if let Some(s) = a.order_seed {
        cfg.schedule.order_seed = Some(s);
    }
    for &ab in &a.ablate {
        cfg.add_ablation(ab);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(i) = a.synthesis_iters {
        cfg.synthesis.iterations = i;
    }
    if let Some(i) = a.images_per_class {
        cfg.synthesis.images_per_class = i;
    }
    if let Some(n) = a.train_per_class {
        cfg.dataset.train_per_class = Some(n);
    }
    if let Some(o) = &a.output_dir {
        cfg.output_dir = Some(o.clone());
    }
    cfg.dump_synthetic |= a.dump_synthetic;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => {
            let cfg = resolve_run_config(&a)?;
            let (dir, log) = run::run(&cfg, a.data_root.as_deref())?;
            let accs: Vec<String> = log.accuracies().iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            println!("run directory: {}", dir.display());
            println!("accuracy per task (%): {}", accs.join(" "));
            Ok(())
        }
        Command::Report(a) => {
            let files = report::report(&a.runs, &a.out)?;
            print!("{}", files.table);
            println!("wrote {} and {}", files.csv.display(), files.svg.display());
            Ok(())
        }
        Command::ExportEmbeddings(a) => {
            let req = export::ExportRequest {
                checkpoint: a.checkpoint,
                data: a.data,
                split: a.split,
                per_class: a.per_class,
                classes: a.classes,
                replay: a.replay,
                out: a.out,
                chunk: a.chunk,
            };
            let e = export::export(&req)?;
            println!("wrote {} rows to {}", e.len(), req.out.display());
            Ok(())
        }
        Command::Sweep(a) => {
            let base = base_config(a.config.as_ref())?;
            let axes = a
                .grid
                .iter()
                .map(|g| sweep::parse_axis(g))
                .collect::<dfcil_core::Result<Vec<_>>>()
                .map_err(CliError::usage)?;
            let cfgs = sweep::expand(&base, &axes).map_err(CliError::usage)?;
            for p in sweep::write_grid(&cfgs, &a.out)? {
                println!("dfcil run --config {}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
