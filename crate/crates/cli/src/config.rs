//! Experiment configuration: a TOML file layered over built-in defaults,
//! with command-line overrides applied last.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dfcil_core::backbone::{BackboneConfig, HeadKind};
use dfcil_core::continual_norm::NormKind;
use dfcil_core::datasets::ClassOrder;
use dfcil_core::losses::LossWeights;
use dfcil_core::synthesis::SynthesisConfig;
use dfcil_core::trainer::{PipelineConfig, ReplayMode, TrainConfig};
use dfcil_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_OUTPUT_ROOT: &str = "DFCIL_OUTPUT_ROOT";
pub const ENV_DATA_ROOT: &str = "DFCIL_DATA_ROOT";

/// One switch per ablation row; switches compose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Replay mean images plus noise instead of optimized impressions.
    NoSynthesis,
    /// Start synthesis from noise instead of class mean images.
    NoMeanInit,
    /// Drop the total-variation, l2 and moment-matching regularizers.
    NoReg,
    /// Plain batch normalization instead of group-then-batch.
    NormBn,
    NoIdc,
    NoMargin,
    /// Linear softmax head with bias instead of the cosine head.
    SoftmaxCe,
    /// No replay and no auxiliary losses: plain fine-tuning.
    Finetune,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::NoSynthesis,
        Ablation::NoMeanInit,
        Ablation::NoReg,
        Ablation::NormBn,
        Ablation::NoIdc,
        Ablation::NoMargin,
        Ablation::SoftmaxCe,
        Ablation::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSynthesis => "no_synthesis",
            Ablation::NoMeanInit => "no_mean_init",
            Ablation::NoReg => "no_reg",
            Ablation::NormBn => "norm_bn",
            Ablation::NoIdc => "no_idc",
            Ablation::NoMargin => "no_margin",
            Ablation::SoftmaxCe => "softmax_ce",
            Ablation::Finetune => "finetune",
        }
    }

    pub fn apply(self, p: &mut PipelineConfig) {
        match self {
            Ablation::NoSynthesis => p.replay = ReplayMode::MeanNoise,
            Ablation::NoMeanInit => p.synthesis.mean_init = false,
            Ablation::NoReg => {
                p.synthesis.alpha_tv = 0.0;
                p.synthesis.alpha_l2 = 0.0;
                p.synthesis.alpha_cn = 0.0;
            }
            Ablation::NormBn => p.backbone.norm.kind = NormKind::Batch,
            Ablation::NoIdc => p.weights.idc = 0.0,
            Ablation::NoMargin => p.weights.margin = 0.0,
            Ablation::SoftmaxCe => p.backbone.head = HeadKind::Linear,
            Ablation::Finetune => {
                p.replay = ReplayMode::None;
                p.weights.dist = 0.0;
                p.weights.idc = 0.0;
                p.weights.margin = 0.0;
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.trim().replace('-', "_");
        let norm = if norm == "norm=bn" { "norm_bn".to_string() } else { norm };
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                format!("unknown ablation '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Class count and default split of the datasets with a known layout.
pub fn preset(name: &str) -> Option<(usize, &'static [usize])> {
    match name.to_ascii_lowercase().as_str() {
        "bloodmnist" => Some((8, &[2, 2, 2, 2])),
        "pathmnist" => Some((9, &[3, 2, 2, 2])),
        "organamnist" => Some((11, &[3, 3, 3, 2])),
        "tissuemnist" => Some((8, &[2, 2, 2, 2])),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Preset name; also the file stem looked up under the data root.
    pub name: Option<String>,
    /// Explicit archive, `.npz` file or image tree.
    pub path: Option<PathBuf>,
    pub pad_to: usize,
    /// Keep at most this many training images per class.
    pub train_per_class: Option<usize>,
    /// Re-split the pooled data with these (train, val, test) ratios.
    pub resplit: Option<[f64; 3]>,
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: None,
            path: None,
            pad_to: 32,
            train_per_class: None,
            resplit: None,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Empty means the dataset preset.
    pub classes_per_task: Vec<usize>,
    /// Shuffle class order with this seed; ascending when absent.
    pub order_seed: Option<u64>,
    /// Explicit class order; wins over `order_seed`.
    pub order: Option<Vec<usize>>,
}

impl ScheduleConfig {
    pub fn class_order(&self) -> ClassOrder {
        match (&self.order, self.order_seed) {
            (Some(p), _) => ClassOrder::Permutation(p.clone()),
            (None, Some(s)) => ClassOrder::Seeded(s),
            (None, None) => ClassOrder::Ascending,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    pub ablate: Vec<Ablation>,
    pub dump_synthetic: bool,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfig,
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            output_dir: None,
            ablate: Vec::new(),
            dump_synthetic: false,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            backbone: BackboneConfig::default(),
            synthesis: SynthesisConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Adds an ablation unless already present; keeps the list sorted.
    pub fn add_ablation(&mut self, a: Ablation) {
        if !self.ablate.contains(&a) {
            self.ablate.push(a);
            self.ablate.sort();
        }
    }

    /// Training configuration with every ablation applied.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig {
            backbone: self.backbone.clone(),
            synthesis: self.synthesis.clone(),
            train: self.train.clone(),
            weights: self.weights,
            replay: ReplayMode::Synthesize,
            dump_synthetic: self.dump_synthetic,
        };
        for a in &self.ablate {
            a.apply(&mut p);
        }
        p
    }

    /// Dataset location: the explicit path, else `<data root>/<name>.npz`.
    pub fn dataset_path(&self, data_root: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = &self.dataset.path {
            return Ok(p.clone());
        }
        let name = self
            .dataset
            .name
            .as_deref()
            .ok_or_else(|| Error::Config("dataset needs a name or a path".into()))?;
        let root = data_root
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        Ok(root.join(format!("{}.npz", name.to_ascii_lowercase())))
    }

    /// Tasks' class counts: explicit, else from the preset.
    pub fn classes_per_task(&self, num_classes: usize) -> Result<Vec<usize>> {
        if !self.schedule.classes_per_task.is_empty() {
            return Ok(self.schedule.classes_per_task.clone());
        }
        match self.dataset.name.as_deref().and_then(preset) {
            Some((k, split)) if k == num_classes => Ok(split.to_vec()),
            Some((k, _)) => Err(Error::Config(format!(
                "preset expects {k} classes but the data has {num_classes}; set schedule.classes_per_task"
            ))),
            None => Err(Error::Config("no schedule given and no dataset preset to fall back on".into())),
        }
    }

    /// Run directory: explicit, else `$DFCIL_OUTPUT_ROOT` or `runs`, joined
    /// with the run name.
    pub fn run_dir(&self) -> PathBuf {
        let root = self
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(ENV_OUTPUT_ROOT).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_parse_and_map() {
        assert_eq!("no-margin".parse::<Ablation>().unwrap(), Ablation::NoMargin);
        assert_eq!("norm=bn".parse::<Ablation>().unwrap(), Ablation::NormBn);
        assert!("no_everything".parse::<Ablation>().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.add_ablation(Ablation::NoMargin);
        let p = cfg.pipeline();
        assert_eq!(p.weights.margin, 0.0);
        assert_eq!(p.weights.idc, 1.0);
    }

    #[test]
    fn ablations_compose() {
        let mut cfg = ExperimentConfig::default();
        cfg.add_ablation(Ablation::NormBn);
        cfg.add_ablation(Ablation::NoMeanInit);
        let p = cfg.pipeline();
        assert_eq!(p.backbone.norm.kind, NormKind::Batch);
        assert!(!p.synthesis.mean_init);
        assert_eq!(p.replay, ReplayMode::Synthesize);
    }

    #[test]
    fn each_ablation_changes_something_distinct() {
        let base = ExperimentConfig::default().pipeline();
        let mut seen = Vec::new();
        for a in Ablation::ALL {
            let mut p = base.clone();
            a.apply(&mut p);
            assert_ne!(p, base, "{a} is a no-op");
            assert!(!seen.contains(&p), "{a} duplicates another ablation");
            seen.push(p);
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.name = "x".into();
        cfg.dataset.name = Some("bloodmnist".into());
        cfg.add_ablation(Ablation::NoIdc);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3").is_err());
        let partial = ExperimentConfig::from_toml("[train]\nepochs = 3").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 40);
    }

    #[test]
    fn presets_follow_known_splits() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.name = Some("OrganaMNIST".into());
        assert_eq!(cfg.classes_per_task(11).unwrap(), vec![3, 3, 3, 2]);
        assert!(cfg.classes_per_task(8).is_err());
        cfg.schedule.classes_per_task = vec![4, 4];
        assert_eq!(cfg.classes_per_task(8).unwrap(), vec![4, 4]);
    }
}
