//! Task loop: supervised training on the first task, then for every later
//! task freeze the model, synthesize replay images for the old classes,
//! grow the classifier and train on replay plus new real data.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dfcil_tensor::{Graph, Sgd, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, FrozenModel, Model};
use crate::checkpoint::Checkpoint;
use crate::continual_norm::Mode;
use crate::datasets::{class_mean_image, Dataset, LabeledImageSet, MeanImage, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    class_centroids, cross_entropy, distillation_loss, idc_loss, margin_loss, total_loss, CentroidSet,
    Centroids, Domain, LossTerms, LossValues, LossWeights,
};
use crate::synthesis::{build_replay_store, dump_batch, save_replay, SynthesisConfig, SyntheticBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate of the per-task cosine schedule.
    pub min_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Validation accuracy every this many epochs; 0 checks only the last
    /// epoch of each task.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 40,
            learning_rate: 0.01,
            min_learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_batch_size: 200,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(Error::Config("need epochs ≥ 1, batch_size ≥ 2 and eval_batch_size ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.min_learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cosine decay from `learning_rate` at epoch 0 towards
    /// `min_learning_rate`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs as f64;
        self.min_learning_rate
            + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// What stands in for old-class data during incremental tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Optimized class impressions.
    #[default]
    Synthesize,
    /// Mean images plus Gaussian noise, no optimization.
    MeanNoise,
    /// No old-class images at all.
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub replay: ReplayMode,
    /// Write PNG grids of every synthesis round into the run directory.
    pub dump_synthetic: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        self.train.validate()?;
        self.weights.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub cn_ce: f64,
    pub dist: f64,
    pub idc: f64,
    pub margin: f64,
    pub total: f64,
    pub lr: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes: Vec<usize>,
    pub seen_classes: Vec<usize>,
    /// Test accuracy over every seen class.
    pub accuracy: f64,
    /// Test accuracy restricted to each task's classes, tasks `0..=task`.
    pub per_task: Vec<f64>,
    pub replay_images: usize,
    /// Trained without replay images.
    pub degraded: bool,
    pub noise_init_classes: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub fingerprint: String,
    pub epochs: Vec<EpochRecord>,
    pub tasks: Vec<TaskRecord>,
    pub wall_clock_seconds: f64,
}

impl MetricsLog {
    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.tasks.last().map(|t| t.accuracy)
    }
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SYNTHETIC_DIR: &str = "synthetic";

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    task: usize,
    cn_ce: f64,
    dist: f64,
    idc: f64,
    margin: f64,
    total: f64,
    lr: f64,
    val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub task: usize,
    pub num_seen: usize,
    pub accuracy: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    status: &'a str,
    error: Option<String>,
    fingerprint: &'a str,
    accuracies: Vec<f64>,
    tasks: &'a [TaskRecord],
    wall_clock_seconds: f64,
}

/// Appends metrics to a run directory as they are produced.
pub struct RunWriter {
    dir: PathBuf,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        for name in [METRICS_CSV, ACCURACY_CSV] {
            let _ = fs::remove_file(dir.join(name));
        }
        Ok(RunWriter { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append<T: Serialize>(&self, name: &str, row: &T) -> Result<()> {
        let path = self.dir.join(name);
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.flush()?;
        Ok(())
    }

    fn epoch(&self, r: &EpochRecord) -> Result<()> {
        self.append(
            METRICS_CSV,
            &MetricsRow {
                epoch: r.epoch,
                task: r.task,
                cn_ce: r.cn_ce,
                dist: r.dist,
                idc: r.idc,
                margin: r.margin,
                total: r.total,
                lr: r.lr,
                val_accuracy: r.val_accuracy,
            },
        )
    }

    fn task(&self, r: &TaskRecord) -> Result<()> {
        self.append(
            ACCURACY_CSV,
            &AccuracyRow { task: r.task, num_seen: r.seen_classes.len(), accuracy: r.accuracy },
        )
    }

    fn summary(&self, log: &MetricsLog, error: Option<&Error>) -> Result<()> {
        let s = Summary {
            status: if error.is_some() { "aborted" } else { "completed" },
            error: error.map(|e| e.to_string()),
            fingerprint: &log.fingerprint,
            accuracies: log.accuracies(),
            tasks: &log.tasks,
            wall_clock_seconds: log.wall_clock_seconds,
        };
        let json = serde_json::to_string_pretty(&s).map_err(std::io::Error::other)?;
        fs::write(self.dir.join(SUMMARY_JSON), json)?;
        Ok(())
    }

    pub fn checkpoint_path(&self, task: usize) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR).join(format!("task_{task}.ckpt"))
    }
}

/// Reads `accuracy.csv` from a run directory.
pub fn read_accuracy_csv(path: &Path) -> Result<Vec<AccuracyRow>> {
    let file = File::open(path)?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::load(path, e)))
        .collect()
}

/// Fraction of test samples of `seen` classes whose highest-scoring class is
/// correct.
pub fn evaluate(model: &Model, set: &LabeledImageSet, seen: &[usize], chunk: usize) -> Result<f64> {
    let idx = set.indices_of_classes(seen);
    if idx.is_empty() {
        return Err(Error::Evaluation(format!("no {} samples for classes {seen:?}", set.split().as_str())));
    }
    let mut correct = 0usize;
    for part in idx.chunks(chunk.max(1)) {
        let x = set.batch_tensor(part);
        let pred = model.predict_logits(&x, chunk)?.argmax_rows();
        correct += pred.iter().zip(set.batch_labels(part)).filter(|(p, l)| **p == *l).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Training items: real samples by index into the task's training set, or
/// replay images by row into the stacked synthetic tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Item {
    Real(usize),
    Replay(usize),
}

struct Pool<'a> {
    real: &'a LabeledImageSet,
    replay: Tensor,
    replay_labels: Vec<usize>,
    by_class: BTreeMap<usize, Vec<Item>>,
}

impl<'a> Pool<'a> {
    fn new(real: &'a LabeledImageSet, real_idx: &[usize], replay: &[SyntheticBatch]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<Item>> = BTreeMap::new();
        for &i in real_idx {
            by_class.entry(real.labels()[i]).or_default().push(Item::Real(i));
        }
        let mut replay_labels = Vec::new();
        let parts: Vec<&Tensor> = replay.iter().map(|b| &b.images).collect();
        for b in replay {
            replay_labels.extend_from_slice(&b.labels);
        }
        for (r, &l) in replay_labels.iter().enumerate() {
            by_class.entry(l).or_default().push(Item::Replay(r));
        }
        let replay = if parts.is_empty() { Tensor::zeros(&[0]) } else { Tensor::concat(&parts, 0) };
        Pool { real, replay, replay_labels, by_class }
    }

    fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    /// Class-balanced draw: a class uniformly at random, then one of its items.
    fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Item> {
        let keys: Vec<usize> = self.by_class.keys().copied().collect();
        (0..n)
            .map(|_| {
                let items = &self.by_class[&keys[rng.random_range(0..keys.len())]];
                items[rng.random_range(0..items.len())]
            })
            .collect()
    }

    /// Batch tensor with real items first, then replay items, plus labels and
    /// the number of real rows.
    fn assemble(&self, items: &[Item]) -> (Tensor, Vec<usize>, usize) {
        let real: Vec<usize> = items.iter().filter_map(|i| if let Item::Real(r) = i { Some(*r) } else { None }).collect();
        let rep: Vec<usize> = items.iter().filter_map(|i| if let Item::Replay(r) = i { Some(*r) } else { None }).collect();
        let mut labels = self.real.batch_labels(&real);
        labels.extend(rep.iter().map(|&r| self.replay_labels[r]));
        let xr = self.real.batch_tensor(&real);
        let x = if rep.is_empty() {
            xr
        } else {
            let xs = self.replay.select_rows(&rep);
            if real.is_empty() { xs } else { Tensor::concat(&[&xr, &xs], 0) }
        };
        (x, labels, real.len())
    }
}

/// Constant rows `start..start+len` of a `[B, F]` graph value.
fn rows(g: &Graph, f: Var, start: usize, len: usize) -> Var {
    g.narrow(f, 0, start, len)
}

/// Output of one incremental step.
pub struct StepOutput {
    pub record: TaskRecord,
    /// The model as it was before the step.
    pub frozen: FrozenModel,
    pub replay: Vec<SyntheticBatch>,
}

/// Model plus everything carried between tasks.
pub struct Learner {
    pub model: Model,
    pub means: BTreeMap<usize, MeanImage>,
    pub cfg: PipelineConfig,
    pub seen: Vec<usize>,
    tasks_done: usize,
    init_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    synth_rng: ChaCha8Rng,
    writer: Option<RunWriter>,
    pub log: MetricsLog,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Learner {
    pub fn new(cfg: PipelineConfig, in_channels: usize, writer: Option<RunWriter>) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let mut init_rng = stream(seed, 0);
        let backbone = BackboneConfig { in_channels, ..cfg.backbone.clone() };
        let model = Model::new(backbone, &mut init_rng)?;
        Ok(Learner {
            model,
            means: BTreeMap::new(),
            log: MetricsLog { fingerprint: cfg.fingerprint(), ..MetricsLog::default() },
            cfg,
            seen: Vec::new(),
            tasks_done: 0,
            init_rng,
            sample_rng: stream(seed, 1),
            synth_rng: stream(seed, 2),
            writer,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    fn register_classes(&mut self, train: &LabeledImageSet, classes: &[usize]) -> Result<()> {
        for &c in classes {
            if self.seen.contains(&c) {
                return Err(Error::Schedule(format!("class {c} introduced twice")));
            }
            self.means.insert(c, class_mean_image(train, c)?);
        }
        Ok(())
    }

    /// Supervised training of a fresh model on the first task.
    pub fn train_first_task(&mut self, data: &Dataset, schedule: &TaskSchedule) -> Result<TaskRecord> {
        if self.tasks_done != 0 {
            return Err(Error::Config("first task already trained".into()));
        }
        let start = Instant::now();
        let classes = schedule.task_classes(0).to_vec();
        self.begin_task(data, &classes)?;
        let real_idx = schedule.task_indices(0, &data.train);
        let pool = Pool::new(&data.train, &real_idx, &[]);
        self.train_task(data, &pool, None, &[], &classes, 0)?;
        self.finish_task(data, schedule, 0, 0, false, Vec::new(), start)
    }

    fn begin_task(&mut self, data: &Dataset, classes: &[usize]) -> Result<()> {
        self.register_classes(&data.train, classes)?;
        // Head row k belongs to class k, so the head always spans 0..=max seen.
        let want = classes.iter().chain(&self.seen).max().map_or(0, |m| m + 1);
        if want > self.model.num_classes() {
            let n = want - self.model.num_classes();
            self.model.expand_classifier(n, &mut self.init_rng)?;
        }
        self.seen.extend_from_slice(classes);
        self.seen.sort_unstable();
        Ok(())
    }

    /// One incremental task: freeze, synthesize replay for old classes, grow
    /// the head, train on replay plus new data.
    pub fn incremental_step(&mut self, data: &Dataset, schedule: &TaskSchedule) -> Result<StepOutput> {
        let t = self.tasks_done;
        if t == 0 || t >= schedule.num_tasks() {
            return Err(Error::Config(format!("no incremental task {t} in a {}-task schedule", schedule.num_tasks())));
        }
        let start = Instant::now();
        let previous = self.seen.clone();
        let frozen = self.model.clone_frozen();
        let snapshot = frozen.snapshot();
        let s = data.shape();
        let image_shape = [s.channels, s.height, s.width];
        let replay = match self.cfg.replay {
            ReplayMode::None => Vec::new(),
            mode => {
                let mut scfg = self.cfg.synthesis.clone();
                if mode == ReplayMode::MeanNoise {
                    scfg.iterations = 0;
                }
                build_replay_store(&frozen, &snapshot, &self.means, &previous, image_shape, &scfg, t - 1, &mut self.synth_rng)?
            }
        };
        if let Some(w) = &self.writer {
            let dir = w.dir().join(SYNTHETIC_DIR);
            if !replay.is_empty() {
                save_replay(&replay, &dir.join(format!("task_{t}.bin")))?;
            }
            if self.cfg.dump_synthetic {
                for (r, b) in replay.iter().enumerate() {
                    dump_batch(b, &dir.join(format!("task_{t}")), r)?;
                }
            }
        }
        let degraded = replay.is_empty();
        if degraded {
            log::warn!("task {t}: no replay images; training with distillation only for old classes");
        }
        let noise_init: Vec<usize> = {
            let mut v: Vec<usize> = replay.iter().flat_map(|b| b.noise_init.iter().copied()).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let classes = schedule.task_classes(t).to_vec();
        self.begin_task(data, &classes)?;
        let real_idx = schedule.task_indices(t, &data.train);
        let pool = Pool::new(&data.train, &real_idx, &replay);
        self.train_task(data, &pool, Some(&frozen), &previous, &classes, t)?;
        let n_replay = replay.iter().map(|b| b.labels.len()).sum();
        let record = self.finish_task(data, schedule, t, n_replay, degraded, noise_init, start)?;
        Ok(StepOutput { record, frozen, replay })
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_task(
        &mut self,
        data: &Dataset,
        schedule: &TaskSchedule,
        t: usize,
        replay_images: usize,
        degraded: bool,
        noise_init_classes: Vec<usize>,
        start: Instant,
    ) -> Result<TaskRecord> {
        let chunk = self.cfg.train.eval_batch_size;
        let accuracy = evaluate(&self.model, &data.test, &self.seen, chunk)?;
        let per_task = (0..=t)
            .map(|k| evaluate(&self.model, &data.test, schedule.task_classes(k), chunk))
            .collect::<Result<Vec<_>>>()?;
        let record = TaskRecord {
            task: t,
            classes: schedule.task_classes(t).to_vec(),
            seen_classes: self.seen.clone(),
            accuracy,
            per_task,
            replay_images,
            degraded,
            noise_init_classes,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("task {t}: accuracy over {} seen classes {:.4}", self.seen.len(), accuracy);
        self.tasks_done = t + 1;
        if let Some(w) = &self.writer {
            w.task(&record)?;
            let ck = Checkpoint {
                task: t,
                seen_classes: self.seen.clone(),
                model: self.model.clone(),
                mean_images: self.means.clone(),
            };
            ck.save(&w.checkpoint_path(t))?;
        }
        self.log.tasks.push(record.clone());
        Ok(record)
    }

    /// Per-class centroids of pseudo-labelled current-task images, labels
    /// restricted to `previous`.
    fn target_centroids(&self, x_real: &Tensor, previous: &[usize]) -> Result<(Vec<usize>, Tensor)> {
        let f = self.model.embed(x_real, self.cfg.train.eval_batch_size)?;
        let z = self.model.head_logits(&f);
        let k = z.shape()[1];
        let labels: Vec<usize> = z
            .data()
            .chunks(k)
            .map(|row| *previous.iter().max_by(|&&a, &&b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap())
            .collect();
        let g = Graph::new();
        let fv = g.constant(f);
        let set = class_centroids(&g, fv, &labels, previous, Domain::Target)?;
        let v = (*g.value(set.centroids.vectors)).clone();
        Ok((set.classes, v))
    }

    fn train_task(
        &mut self,
        data: &Dataset,
        pool: &Pool,
        frozen: Option<&FrozenModel>,
        previous: &[usize],
        new_classes: &[usize],
        t: usize,
    ) -> Result<()> {
        let tc = self.cfg.train.clone();
        let w = self.cfg.weights;
        let mut sgd = Sgd::new(tc.learning_rate, tc.momentum, tc.weight_decay);
        let steps = pool.len().div_ceil(tc.batch_size).max(1);
        let want_idc = frozen.is_some() && w.idc > 0.0 && !pool.replay_labels.is_empty();
        let real_x = if want_idc {
            let idx: Vec<usize> = pool
                .by_class
                .values()
                .flatten()
                .filter_map(|i| if let Item::Real(r) = i { Some(*r) } else { None })
                .collect();
            Some(pool.real.batch_tensor(&idx))
        } else {
            None
        };
        for epoch in 0..tc.epochs {
            sgd.lr = tc.lr_at(epoch);
            let target = match &real_x {
                Some(x) => Some(self.target_centroids(x, previous)?),
                None => None,
            };
            let mut sum = LossValues::default();
            for _ in 0..steps {
                let items = pool.sample(tc.batch_size, &mut self.sample_rng);
                let (x, labels, n_real) = pool.assemble(&items);
                let v = self
                    .step(&mut sgd, &x, &labels, n_real, frozen, target.as_ref(), previous, new_classes)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("task {t} epoch {epoch}: {m}")),
                        other => other,
                    })?;
                sum.cn_ce += v.cn_ce;
                sum.dist += v.dist;
                sum.idc += v.idc;
                sum.margin += v.margin;
                sum.total += v.total;
            }
            let n = steps as f64;
            let last = epoch + 1 == tc.epochs;
            let check_val = last || (tc.val_every > 0 && (epoch + 1) % tc.val_every == 0);
            let val_accuracy = if check_val && !data.val.indices_of_classes(&self.seen).is_empty() {
                Some(evaluate(&self.model, &data.val, &self.seen, tc.eval_batch_size)?)
            } else {
                None
            };
            let rec = EpochRecord {
                task: t,
                epoch,
                cn_ce: sum.cn_ce / n,
                dist: sum.dist / n,
                idc: sum.idc / n,
                margin: sum.margin / n,
                total: sum.total / n,
                lr: sgd.lr,
                val_accuracy,
            };
            log::debug!("task {t} epoch {epoch}: loss {:.4}", rec.total);
            if let Some(wr) = &self.writer {
                wr.epoch(&rec)?;
            }
            self.log.epochs.push(rec);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        sgd: &mut Sgd,
        x: &Tensor,
        labels: &[usize],
        n_real: usize,
        frozen: Option<&FrozenModel>,
        target: Option<&(Vec<usize>, Tensor)>,
        previous: &[usize],
        new_classes: &[usize],
    ) -> Result<LossValues> {
        let w = self.cfg.weights;
        let b = labels.len();
        let n_rep = b - n_real;
        let g = Graph::new();
        let p = self.model.params.bind(&g, true);
        let xv = g.constant(x.clone());
        let f = self.model.forward_features(&g, &p, xv, Mode::Train)?;
        let logits = self.model.logits(&g, &p, f);
        let ce = cross_entropy(&g, logits, labels)?;
        let theta = p[self.model.bank.weight];
        let mut terms = LossTerms { ce, dist: None, idc: None, margin: None };
        if let Some(frozen) = frozen {
            if w.dist > 0.0 {
                let old = g.constant(frozen.embed(x, self.cfg.train.eval_batch_size)?);
                terms.dist = Some(distillation_loss(&g, old, f)?);
            }
            if n_rep > 0 {
                let anchors = rows(&g, f, n_real, n_rep);
                let anchor_labels = &labels[n_real..];
                if w.margin > 0.0 {
                    terms.margin = Some(margin_loss(&g, anchors, anchor_labels, theta, new_classes, w.margin_m)?);
                }
                if let (true, Some((t_classes, t_vecs))) = (w.idc > 0.0, target) {
                    let source = class_centroids(&g, anchors, anchor_labels, previous, Domain::Source)?;
                    let shared: Vec<usize> = source.classes.iter().copied().filter(|c| t_classes.contains(c)).collect();
                    if !shared.is_empty() {
                        let tgt = CentroidSet {
                            domain: Domain::Target,
                            classes: t_classes.clone(),
                            centroids: Centroids { domain: Domain::Target, vectors: g.constant(t_vecs.clone()) },
                        };
                        terms.idc = Some(idc_loss(&g, &source, &tgt, w.tau, &shared)?);
                    }
                }
            }
        }
        let (total, values) = total_loss(&g, &terms, &w)?;
        let grads = g.backward(total);
        let gs: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        let mask = self.model.params.decay_mask().to_vec();
        sgd.step(self.model.params.tensors_mut(), &gs, &mask);
        Ok(values)
    }

    /// Writes the final summary, marking the run aborted when `error` is set.
    pub fn flush_summary(&mut self, started: Instant, error: Option<&Error>) -> Result<()> {
        self.log.wall_clock_seconds = started.elapsed().as_secs_f64();
        if let Some(w) = &self.writer {
            w.summary(&self.log, error)?;
        }
        Ok(())
    }
}

/// Trains through every task of `schedule`, evaluating after each. When
/// `out_dir` is given, metrics, checkpoints and a summary are written there;
/// on failure the partial log is flushed before the error is returned.
pub fn run_pipeline(
    data: &Dataset,
    schedule: &TaskSchedule,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(MetricsLog, Model)> {
    if schedule.num_classes() != data.num_classes {
        return Err(Error::Schedule(format!(
            "schedule covers {} classes, dataset has {}",
            schedule.num_classes(),
            data.num_classes
        )));
    }
    let started = Instant::now();
    let writer = out_dir.map(RunWriter::create).transpose()?;
    let mut learner = Learner::new(cfg.clone(), data.shape().channels, writer)?;
    let result = (|| {
        learner.train_first_task(data, schedule)?;
        for _ in 1..schedule.num_tasks() {
            learner.incremental_step(data, schedule)?;
        }
        Ok(())
    })();
    let flushed = learner.flush_summary(started, result.as_ref().err());
    result?;
    flushed?;
    Ok((learner.log, learner.model))
}
