use std::fs;
use std::path::{Path, PathBuf};

use dfcil_core::datasets::{build_task_schedule, load_dataset, Dataset, TaskSchedule};
use dfcil_core::trainer::{run_pipeline, MetricsLog};
use dfcil_core::Error;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";

/// Everything a run needs, resolved before any file is written.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub schedule: TaskSchedule,
    pub run_dir: PathBuf,
}

/// Validates the config and loads the data. Nothing touches the run
/// directory here, so failures leave no trace on disk.
pub fn prepare(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<Prepared, CliError> {
    let pipeline = cfg.pipeline();
    pipeline.validate().map_err(CliError::usage)?;
    let path = cfg.dataset_path(data_root).map_err(CliError::usage)?;
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset not found: {}", path.display())));
    }
    let mut data = load_dataset(&path, cfg.dataset.pad_to).map_err(CliError::usage)?;
    if let Some([a, b, c]) = cfg.dataset.resplit {
        data = data.resplit((a, b, c), cfg.dataset.data_seed).map_err(CliError::usage)?;
    }
    if let Some(n) = cfg.dataset.train_per_class {
        data.train = data.train.subsample_per_class(n, cfg.dataset.data_seed);
    }
    let per_task = cfg.classes_per_task(data.num_classes).map_err(CliError::usage)?;
    let schedule = build_task_schedule(data.num_classes, &per_task, &cfg.schedule.class_order())
        .map_err(CliError::usage)?;
    let mut config = cfg.clone();
    config.dataset.path = Some(path);
    Ok(Prepared { run_dir: cfg.run_dir(), config, data, schedule })
}

/// Writes the resolved config, then trains. The persisted config reproduces
/// the run when passed back with `--config`.
pub fn execute(p: &Prepared) -> Result<MetricsLog, CliError> {
    fs::create_dir_all(&p.run_dir).map_err(|e| CliError::Runtime(e.into()))?;
    let text = p.config.to_toml().map_err(CliError::Runtime)?;
    fs::write(p.run_dir.join(CONFIG_FILE), text).map_err(|e| CliError::Runtime(e.into()))?;
    log::info!(
        "run '{}': {} tasks {:?}, {} train images, dir {}",
        p.config.name,
        p.schedule.num_tasks(),
        p.schedule.tasks(),
        p.data.train.len(),
        p.run_dir.display()
    );
    let (log, _) = run_pipeline(&p.data, &p.schedule, &p.config.pipeline(), Some(&p.run_dir))
        .map_err(CliError::Runtime)?;
    Ok(log)
}

pub fn run(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<(PathBuf, MetricsLog), CliError> {
    let p = prepare(cfg, data_root)?;
    let log = execute(&p)?;
    Ok((p.run_dir, log))
}

impl CliError {
    pub fn usage(e: Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
