//! Residual feature extractor with continual-normalization layers and a
//! growable classifier head.

use dfcil_tensor::{inverse_softplus, softplus, Conv2dSpec, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::continual_norm::{cn_apply, update_running_moments, CapturedMoments, CnLayerState, CnSnapshot, Mode, NormConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Guard added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Temperature-scaled cosine similarity, no bias.
    #[default]
    Cosine,
    /// Plain affine logits with bias.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Output widths of the three residual blocks; the last is the feature size.
    pub widths: [usize; 3],
    pub norm: NormConfig,
    pub head: HeadKind,
    /// Initial temperature of the cosine head.
    pub init_temperature: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_width: 32,
            widths: [32, 64, 128],
            norm: NormConfig::default(),
            head: HeadKind::Cosine,
            init_temperature: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConvUnit {
    weight: ParamId,
    spec: Conv2dSpec,
    norm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    conv1: ConvUnit,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    pub kind: HeadKind,
    /// `[K, F]`; row `k` belongs to class `k`.
    pub weight: ParamId,
    /// Pre-softplus temperature, cosine head only.
    pub rho: Option<ParamId>,
    /// `[K]`, linear head only.
    pub bias: Option<ParamId>,
    pub num_classes: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub norms: Vec<CnLayerState>,
    stem: ConvUnit,
    blocks: Vec<Block>,
    pub bank: ClassEmbeddingBank,
}

/// Everything one forward pass produced.
pub struct ForwardPass {
    /// Pooled features, `[B, F]`.
    pub features: Var,
    /// Per-layer batch statistics when capture was requested.
    pub captured: Vec<CapturedMoments>,
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Model {
    /// A fresh extractor with an empty classifier.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.in_channels == 0 || config.stem_width == 0 || config.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut params = ParamStore::default();
        let mut norms = Vec::new();
        let conv = |params: &mut ParamStore,
                        norms: &mut Vec<CnLayerState>,
                        name: &str,
                        c_in: usize,
                        c_out: usize,
                        k: usize,
                        stride: usize,
                        rng: &mut dyn rand::RngCore|
         -> Result<ConvUnit> {
            let weight = params.add(format!("{name}.weight"), he_normal(rng, &[c_out, c_in, k, k]), true);
            let scale = params.add(format!("{name}.norm.scale"), Tensor::ones(&[c_out]), false);
            let shift = params.add(format!("{name}.norm.shift"), Tensor::zeros(&[c_out]), false);
            norms.push(CnLayerState::new(c_out, &config.norm, scale, shift)?);
            Ok(ConvUnit {
                weight,
                spec: Conv2dSpec { stride, padding: k / 2 },
                norm: norms.len() - 1,
            })
        };
        let stem = conv(&mut params, &mut norms, "stem", config.in_channels, config.stem_width, 3, 1, rng)?;
        let mut blocks = Vec::new();
        let mut c_in = config.stem_width;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let name = format!("block{}", i + 1);
            let conv1 = conv(&mut params, &mut norms, &format!("{name}.conv1"), c_in, w, 3, stride, rng)?;
            let conv2 = conv(&mut params, &mut norms, &format!("{name}.conv2"), w, w, 3, 1, rng)?;
            let shortcut = if stride != 1 || c_in != w {
                Some(conv(&mut params, &mut norms, &format!("{name}.shortcut"), c_in, w, 1, stride, rng)?)
            } else {
                None
            };
            blocks.push(Block { conv1, conv2, shortcut });
            c_in = w;
        }
        let dim = config.feature_dim();
        let weight = params.add("head.weight", Tensor::zeros(&[0, dim]), config.head == HeadKind::Linear);
        let (rho, bias) = match config.head {
            HeadKind::Cosine => (
                Some(params.add(
                    "head.rho",
                    Tensor::new(&[1], vec![inverse_softplus(config.init_temperature)]),
                    false,
                )),
                None,
            ),
            HeadKind::Linear => (None, Some(params.add("head.bias", Tensor::zeros(&[0]), false))),
        };
        let bank = ClassEmbeddingBank {
            kind: config.head,
            weight,
            rho,
            bias,
            num_classes: 0,
            dim,
        };
        Ok(Model { config, params, norms, stem, blocks, bank })
    }

    pub fn feature_dim(&self) -> usize {
        self.bank.dim
    }

    pub fn num_classes(&self) -> usize {
        self.bank.num_classes
    }

    pub fn num_norm_layers(&self) -> usize {
        self.norms.len()
    }

    /// Current cosine temperature `softplus(rho)`.
    pub fn temperature(&self) -> Option<f64> {
        self.bank.rho.map(|r| softplus(self.params.get(r).item()))
    }

    /// Number of scalars in the feature extractor, excluding the head.
    pub fn extractor_size(&self) -> usize {
        let head = [Some(self.bank.weight), self.bank.rho, self.bank.bias];
        self.params.num_scalars()
            - head.iter().flatten().map(|&id| self.params.get(id).len()).sum::<usize>()
    }

    /// Appends `n_new` class rows drawn from `N(0, 1/F)`; existing rows are
    /// left untouched.
    pub fn expand_classifier(&mut self, n_new: usize, rng: &mut impl Rng) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Config("classifier expansion needs at least one class".into()));
        }
        let dim = self.bank.dim;
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let fresh = Tensor::from_fn(&[n_new, dim], |_| normal.sample(rng));
        let w = Tensor::concat(&[self.params.get(self.bank.weight), &fresh], 0);
        self.params.set(self.bank.weight, w);
        if let Some(b) = self.bank.bias {
            let grown = Tensor::concat(&[self.params.get(b), &Tensor::zeros(&[n_new])], 0);
            self.params.set(b, grown);
        }
        self.bank.num_classes += n_new;
        Ok(())
    }

    fn unit(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        u: &ConvUnit,
        mode: Mode,
        capture: bool,
        pending: &mut Vec<(usize, crate::continual_norm::BatchMoments)>,
        captured: &mut Vec<CapturedMoments>,
    ) -> Result<Var> {
        let h = g.conv2d(x, p[u.weight], u.spec);
        let st = &self.norms[u.norm];
        let out = cn_apply(g, h, st, p[st.affine_scale], p[st.affine_shift], mode, capture)?;
        if !g.value(out.y).is_finite() {
            return Err(Error::Numeric(format!("non-finite activation after layer {}", u.norm)));
        }
        if let Some(b) = out.batch {
            pending.push((u.norm, b));
        }
        if let Some(c) = out.captured {
            captured.push(c);
        }
        Ok(out.y)
    }

    /// Runs the extractor without mutating any state. Returns the pooled
    /// features, the per-layer batch moments observed in train mode and, when
    /// `capture` is set, differentiable batch statistics per layer.
    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        mode: Mode,
        capture: bool,
    ) -> Result<(ForwardPass, Vec<(usize, crate::continual_norm::BatchMoments)>)> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected [B, {}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2] < 8 || shape[3] < 8 {
            return Err(Error::Shape(format!("input {}×{} smaller than 8×8", shape[2], shape[3])));
        }
        let mut pending = Vec::new();
        let mut captured = Vec::new();
        let mut h = self.unit(g, p, x, &self.stem, mode, capture, &mut pending, &mut captured)?;
        h = g.relu(h);
        for b in &self.blocks {
            let mut y = self.unit(g, p, h, &b.conv1, mode, capture, &mut pending, &mut captured)?;
            y = g.relu(y);
            y = self.unit(g, p, y, &b.conv2, mode, capture, &mut pending, &mut captured)?;
            let skip = match &b.shortcut {
                Some(s) => self.unit(g, p, h, s, mode, capture, &mut pending, &mut captured)?,
                None => h,
            };
            h = g.relu(g.add(y, skip));
        }
        let features = g.mean_axes(h, &[2, 3]);
        let b = shape[0];
        let features = g.reshape(features, &[b, self.feature_dim()]);
        Ok((ForwardPass { features, captured }, pending))
    }

    /// Pooled features of `x: [B, C, H, W]`. Train mode updates the running
    /// moments of every normalization layer.
    pub fn forward_features(&mut self, g: &Graph, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let (pass, pending) = self.run(g, p, x, mode, false)?;
        for (layer, batch) in pending {
            let st = &mut self.norms[layer];
            let m = st.momentum;
            update_running_moments(st, &batch, m)?;
        }
        Ok(pass.features)
    }

    /// Eval-mode forward that also returns the batch statistics of every
    /// normalization layer's input.
    pub fn forward_capture(&self, g: &Graph, p: &Bound, x: Var) -> Result<ForwardPass> {
        Ok(self.run(g, p, x, Mode::Eval, true)?.0)
    }

    /// Eval-mode forward with no state change.
    pub fn forward_eval(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.run(g, p, x, Mode::Eval, false)?.0.features)
    }

    /// Class scores for features `f: [B, F]`.
    pub fn logits(&self, g: &Graph, p: &Bound, f: Var) -> Var {
        let w = p[self.bank.weight];
        match self.bank.kind {
            HeadKind::Cosine => {
                let eta = g.softplus(p[self.bank.rho.expect("cosine head has rho")]);
                cosine_logits(g, f, w, eta)
            }
            HeadKind::Linear => {
                let z = g.matmul_t(f, w, false, true);
                g.add(z, p[self.bank.bias.expect("linear head has bias")])
            }
        }
    }

    /// Eval-mode features for a batch, computed in chunks.
    pub fn embed(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let b = x.shape()[0];
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        for start in (0..b).step_by(chunk) {
            let len = chunk.min(b - start);
            let g = Graph::new();
            let p = self.params.bind(&g, false);
            let xv = g.constant(x.narrow(0, start, len));
            let f = self.forward_eval(&g, &p, xv)?;
            parts.push((*g.value(f)).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.feature_dim()]));
        }
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0))
    }

    /// Eval-mode class scores for a batch.
    pub fn predict_logits(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let f = self.embed(x, chunk)?;
        Ok(self.head_logits(&f))
    }

    /// Head applied to precomputed features.
    pub fn head_logits(&self, f: &Tensor) -> Tensor {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let fv = g.constant(f.clone());
        let z = self.logits(&g, &p, fv);
        (*g.value(z)).clone()
    }

    pub fn snapshot(&self) -> CnSnapshot {
        CnSnapshot::capture(&self.norms)
    }

    /// Deep copy pinned to eval mode.
    pub fn clone_frozen(&self) -> FrozenModel {
        FrozenModel { inner: self.clone() }
    }
}

/// Read-only copy of a model. Parameters are recorded as constants and all
/// normalization runs on saved moments.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    inner: Model,
}

impl FrozenModel {
    pub fn model(&self) -> &Model {
        &self.inner
    }

    pub fn bind(&self, g: &Graph) -> Bound {
        self.inner.params.bind(g, false)
    }

    pub fn forward_capture(&self, g: &Graph, p: &Bound, x: Var) -> Result<ForwardPass> {
        self.inner.forward_capture(g, p, x)
    }

    pub fn embed(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.inner.embed(x, chunk)
    }

    pub fn snapshot(&self) -> CnSnapshot {
        self.inner.snapshot()
    }
}

/// `eta · ⟨θ̄_k, f̄_b⟩` for features `[B, F]` and embeddings `[K, F]`.
pub fn cosine_logits(g: &Graph, f: Var, theta: Var, eta: Var) -> Var {
    let fb = g.row_normalize(f, NORM_EPS);
    let tb = g.row_normalize(theta, NORM_EPS);
    g.mul(g.matmul_t(fb, tb, false, true), eta)
}

/// Value-level [`cosine_logits`].
pub fn cosine_logits_values(f: &Tensor, theta: &Tensor, eta: f64) -> Tensor {
    let g = Graph::new();
    let (fv, tv) = (g.constant(f.clone()), g.constant(theta.clone()));
    let e = g.constant(Tensor::scalar(eta));
    (*g.value(cosine_logits(&g, fv, tv, e))).clone()
}
