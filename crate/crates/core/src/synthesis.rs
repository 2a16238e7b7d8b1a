//! Class-impression synthesis: pixel-space optimization of an image batch
//! against a frozen classifier, regularized towards the saved normalization
//! moments, smoothness and small magnitude.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dfcil_tensor::{Adam, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::FrozenModel;
use crate::continual_norm::{CapturedMoments, CnSnapshot, LayerMoments};
use crate::datasets::MeanImage;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::params::Bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_cn: f64,
    pub images_per_class: usize,
    /// Start from the class mean image; otherwise from `N(0.5, 0.1)` noise.
    pub mean_init: bool,
    /// Standard deviation of Gaussian noise added to the mean-image start.
    pub init_noise_std: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            batch_size: 40,
            iterations: 2000,
            learning_rate: 0.01,
            alpha_tv: 2.5e-4,
            alpha_l2: 3e-6,
            alpha_cn: 10.0,
            images_per_class: 40,
            mean_init: true,
            init_noise_std: 0.1,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.images_per_class == 0 {
            return Err(Error::Config("synthesis batch size and images per class must be positive".into()));
        }
        let alphas = [self.alpha_tv, self.alpha_l2, self.alpha_cn, self.init_noise_std];
        if alphas.iter().any(|a| !(*a >= 0.0)) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("synthesis weights must be ≥ 0 and learning rate > 0".into()));
        }
        Ok(())
    }
}

/// Synthesized images with their target labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBatch {
    /// `[M, C, H, W]`, every pixel in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Task whose frozen model produced the batch.
    pub source_task: usize,
    /// Objective at the returned images.
    pub final_objective: f64,
    /// Objective before each optimizer step.
    pub trace: Vec<f64>,
    /// Labels that had no stored mean image and started from noise.
    pub noise_init: Vec<usize>,
}

/// Sum of squared horizontal and vertical neighbour differences, divided by
/// the batch size.
pub fn r_tv(g: &Graph, x: Var) -> Var {
    let s = g.shape(x);
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut total = g.constant(Tensor::scalar(0.0));
    if w > 1 {
        let d = g.sub(g.narrow(x, 3, 1, w - 1), g.narrow(x, 3, 0, w - 1));
        total = g.add(total, g.sum(g.square(d)));
    }
    if h > 1 {
        let d = g.sub(g.narrow(x, 2, 1, h - 1), g.narrow(x, 2, 0, h - 1));
        total = g.add(total, g.sum(g.square(d)));
    }
    g.mul_scalar(total, 1.0 / b.max(1) as f64)
}

/// Mean over the batch of each image's Euclidean norm.
pub fn r_l2(g: &Graph, x: Var) -> Var {
    let s = g.shape(x);
    let b = s[0];
    let flat = g.reshape(x, &[b, s[1..].iter().product()]);
    g.mean(g.row_norm(flat))
}

fn dist(g: &Graph, v: Var, saved: &[f64]) -> Result<Var> {
    if g.value(v).len() != saved.len() {
        return Err(Error::Structure(format!(
            "captured moments have {} entries, saved {}",
            g.value(v).len(),
            saved.len()
        )));
    }
    let t = g.constant(Tensor::new(&[saved.len()], saved.to_vec()));
    Ok(g.norm(g.sub(v, t)))
}

/// Sum over layers of the four distances between the batch moments of the
/// current input and the saved running moments.
pub fn r_cn(g: &Graph, captured: &[CapturedMoments], snapshot: &CnSnapshot) -> Result<Var> {
    if captured.len() != snapshot.len() {
        return Err(Error::Structure(format!(
            "{} captured layers against {} saved",
            captured.len(),
            snapshot.len()
        )));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for (c, s) in captured.iter().zip(snapshot.layers()) {
        match (c.gn_mean, c.gn_var) {
            (Some(m), Some(v)) => {
                total = g.add(total, dist(g, m, &s.gn_mean)?);
                total = g.add(total, dist(g, v, &s.gn_var)?);
            }
            _ if !s.gn_mean.is_empty() => {
                return Err(Error::Structure("group-stage moments missing from capture".into()));
            }
            _ => {}
        }
        total = g.add(total, dist(g, c.bn_mean, &s.bn_mean)?);
        total = g.add(total, dist(g, c.bn_var, &s.bn_var)?);
    }
    Ok(total)
}

/// [`r_cn`] on plain moment values.
pub fn r_cn_values(batch: &[LayerMoments], snapshot: &CnSnapshot) -> Result<f64> {
    let g = Graph::new();
    let vec = |v: &[f64]| g.constant(Tensor::new(&[v.len()], v.to_vec()));
    let captured: Vec<CapturedMoments> = batch
        .iter()
        .map(|m| CapturedMoments {
            gn_mean: (!m.gn_mean.is_empty()).then(|| vec(&m.gn_mean)),
            gn_var: (!m.gn_var.is_empty()).then(|| vec(&m.gn_var)),
            bn_mean: vec(&m.bn_mean),
            bn_var: vec(&m.bn_var),
        })
        .collect();
    Ok(g.scalar_value(r_cn(&g, &captured, snapshot)?))
}

/// Objective terms at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveParts {
    pub class: f64,
    pub tv: f64,
    pub l2: f64,
    pub cn: f64,
    pub total: f64,
}

/// Classification loss of the frozen model plus the weighted regularizers.
pub fn synthesis_objective(
    g: &Graph,
    x: Var,
    labels: &[usize],
    frozen: &FrozenModel,
    p: &Bound,
    snapshot: &CnSnapshot,
    cfg: &SynthesisConfig,
) -> Result<(Var, ObjectiveParts)> {
    let model = frozen.model();
    let pass = frozen.forward_capture(g, p, x)?;
    let logits = model.logits(g, p, pass.features);
    let class = cross_entropy(g, logits, labels)?;
    let tv = r_tv(g, x);
    let l2 = r_l2(g, x);
    let cn = r_cn(g, &pass.captured, snapshot)?;
    let mut total = class;
    for (term, a) in [(tv, cfg.alpha_tv), (l2, cfg.alpha_l2), (cn, cfg.alpha_cn)] {
        if a != 0.0 {
            total = g.add(total, g.mul_scalar(term, a));
        }
    }
    let parts = ObjectiveParts {
        class: g.scalar_value(class),
        tv: g.scalar_value(tv),
        l2: g.scalar_value(l2),
        cn: g.scalar_value(cn),
        total: g.scalar_value(total),
    };
    Ok((total, parts))
}

/// Starting images: each label's mean image plus optional noise, or
/// `N(0.5, 0.1)` noise when no mean image is available or mean
/// initialization is off. Returns the batch and the labels that fell back
/// to noise.
pub fn initial_images(
    means: &BTreeMap<usize, MeanImage>,
    labels: &[usize],
    shape: [usize; 3],
    cfg: &SynthesisConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = shape;
    let per = c * h * w;
    let fallback = Normal::<f64>::new(0.5, 0.1).unwrap();
    let jitter = Normal::<f64>::new(0.0, cfg.init_noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Vec::with_capacity(labels.len() * per);
    let mut noise_init = Vec::new();
    for &l in labels {
        match means.get(&l).filter(|_| cfg.mean_init) {
            Some(m) => {
                let t = m.to_tensor();
                if t.shape() != [1, c, h, w] {
                    return Err(Error::Shape(format!(
                        "mean image of class {l} has shape {:?}, expected {shape:?}",
                        &t.shape()[1..]
                    )));
                }
                if cfg.init_noise_std > 0.0 {
                    data.extend(t.data().iter().map(|v| (v + jitter.sample(rng)).clamp(0.0, 1.0)));
                } else {
                    data.extend_from_slice(t.data());
                }
            }
            None => {
                if cfg.mean_init && !noise_init.contains(&l) {
                    log::warn!("no mean image for class {l}; starting from noise");
                    noise_init.push(l);
                }
                data.extend((0..per).map(|_| fallback.sample(rng).clamp(0.0, 1.0)));
            }
        }
    }
    Ok((Tensor::new(&[labels.len(), c, h, w], data), noise_init))
}

/// Optimizes one batch with Adam, clamping pixels to `[0, 1]` after every
/// step. The frozen model and snapshot are only read.
pub fn synthesize_batch(
    frozen: &FrozenModel,
    snapshot: &CnSnapshot,
    means: &BTreeMap<usize, MeanImage>,
    labels: &[usize],
    image_shape: [usize; 3],
    cfg: &SynthesisConfig,
    source_task: usize,
    rng: &mut impl Rng,
) -> Result<SyntheticBatch> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = frozen.model().num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {bad} unknown to the frozen model ({k} classes)")));
    }
    let (init, noise_init) = initial_images(means, labels, image_shape, cfg, rng)?;
    let mut images = [init];
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let g = Graph::new();
        let p = frozen.bind(&g);
        let x = g.leaf(images[0].clone());
        let (obj, parts) = synthesis_objective(&g, x, labels, frozen, &p, snapshot, cfg)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("synthesis objective not finite at iteration {it}")));
        }
        trace.push(parts.total);
        let grads = g.backward(obj);
        let gx = grads.get_or_zeros(x, images[0].shape());
        adam.step(&mut images, &[gx]);
        for v in images[0].data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let [images] = images;
    let g = Graph::new();
    let p = frozen.bind(&g);
    let x = g.constant(images.clone());
    let (_, parts) = synthesis_objective(&g, x, labels, frozen, &p, snapshot, cfg)?;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "synthesis objective not finite at iteration {}",
            cfg.iterations
        )));
    }
    Ok(SyntheticBatch {
        images,
        labels: labels.to_vec(),
        source_task,
        final_objective: parts.total,
        trace,
        noise_init,
    })
}

/// Label sequence for each synthesis round: classes are cycled in order until
/// every class has `images_per_class` entries, then cut into batches.
pub fn replay_rounds(classes: &[usize], images_per_class: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let total = classes.len() * images_per_class;
    let seq: Vec<usize> = (0..total).map(|i| classes[i % classes.len()]).collect();
    seq.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Synthesizes `images_per_class` images for every class in `previous`.
#[allow(clippy::too_many_arguments)]
pub fn build_replay_store(
    frozen: &FrozenModel,
    snapshot: &CnSnapshot,
    means: &BTreeMap<usize, MeanImage>,
    previous: &[usize],
    image_shape: [usize; 3],
    cfg: &SynthesisConfig,
    source_task: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SyntheticBatch>> {
    if previous.is_empty() {
        return Err(Error::Config("replay store needs at least one previous class".into()));
    }
    let rounds = replay_rounds(previous, cfg.images_per_class, cfg.batch_size);
    let mut out = Vec::with_capacity(rounds.len());
    for (r, labels) in rounds.iter().enumerate() {
        let batch = synthesize_batch(frozen, snapshot, means, labels, image_shape, cfg, source_task, rng)?;
        log::info!(
            "synthesis round {}/{}: objective {:.4}",
            r + 1,
            rounds.len(),
            batch.final_objective
        );
        out.push(batch);
    }
    Ok(out)
}

pub const REPLAY_MAGIC: &[u8; 8] = b"DFCILRPL";

/// Saves replay batches as magic, version, then a bincode body.
pub fn save_replay(batches: &[SyntheticBatch], path: &Path) -> Result<()> {
    let mut out = REPLAY_MAGIC.to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    bincode::serialize_into(&mut out, batches).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_replay(path: &Path) -> Result<Vec<SyntheticBatch>> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != REPLAY_MAGIC || bytes[8..12] != 1u32.to_le_bytes() {
        return Err(Error::load(path, "not a replay file of version 1"));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| Error::load(path, e))
}

#[derive(Serialize)]
struct RoundManifest<'a> {
    round: usize,
    source_task: usize,
    labels: &'a [usize],
    final_objective: f64,
    noise_init: &'a [usize],
}

/// Writes a PNG grid of the batch (one row per up to 10 images) plus a JSON
/// manifest next to it.
pub fn dump_batch(batch: &SyntheticBatch, dir: &Path, round: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = batch.images.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = m.clamp(1, 10);
    let rows = m.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut grid = image::RgbImage::new(gw as u32, gh as u32);
    let data = batch.images.data();
    for i in 0..m {
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = data[((i * c + ch.min(c - 1)) * h + y) * w + x];
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                grid.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    let png = dir.join(format!("round_{round:03}.png"));
    grid.save(&png)
        .map_err(|e| std::io::Error::other(format!("{}: {e}", png.display())))?;
    let manifest = RoundManifest {
        round,
        source_task: batch.source_task,
        labels: &batch.labels,
        final_objective: batch.final_objective,
        noise_init: &batch.noise_init,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    fs::write(dir.join(format!("round_{round:03}.json")), json)?;
    Ok(())
}
