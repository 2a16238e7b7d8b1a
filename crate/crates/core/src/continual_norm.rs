//! Continual Normalization: group normalization followed by batch
//! normalization, with running moments tracked for both stages.
//!
//! The group stage is affine-free; the batch stage carries the per-channel
//! scale and shift, so the composition applies the affine map once. Group
//! running moments are stored batch-averaged as `[G]`, batch-stage running
//! moments as `[C]`.

use dfcil_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamId;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Group stage then batch stage.
    #[default]
    Continual,
    /// Batch stage only.
    Batch,
}

/// Which moments the group stage uses outside training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupEvalStats {
    /// Saved running moments, like the batch stage.
    #[default]
    Running,
    /// Each sample's own group moments, as during training.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub kind: NormKind,
    pub momentum: f64,
    pub eps: f64,
    /// Overrides [`default_groups`] when set.
    pub groups: Option<usize>,
    pub group_eval: GroupEvalStats,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            kind: NormKind::Continual,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            groups: None,
            group_eval: GroupEvalStats::Running,
        }
    }
}

/// 8 groups when 8 divides `channels`, else the largest power-of-two divisor.
pub fn default_groups(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1 << channels.trailing_zeros()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnLayerState {
    pub kind: NormKind,
    pub num_channels: usize,
    pub num_groups: usize,
    pub gn_running_mean: Vec<f64>,
    pub gn_running_var: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub affine_scale: ParamId,
    pub affine_shift: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub group_eval: GroupEvalStats,
    /// Number of running-moment updates applied so far.
    pub updates: u64,
}

impl CnLayerState {
    pub fn new(
        num_channels: usize,
        cfg: &NormConfig,
        affine_scale: ParamId,
        affine_shift: ParamId,
    ) -> Result<Self> {
        let num_groups = match cfg.kind {
            NormKind::Continual => cfg.groups.unwrap_or_else(|| default_groups(num_channels)),
            NormKind::Batch => 0,
        };
        if cfg.kind == NormKind::Continual && (num_groups == 0 || num_channels % num_groups != 0) {
            return Err(Error::Shape(format!(
                "{num_channels} channels cannot be split into {num_groups} groups"
            )));
        }
        if !(0.0..=1.0).contains(&cfg.momentum) || cfg.eps < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1] and eps ≥ 0".into()));
        }
        Ok(CnLayerState {
            kind: cfg.kind,
            num_channels,
            num_groups,
            gn_running_mean: vec![0.0; num_groups],
            gn_running_var: vec![1.0; num_groups],
            bn_running_mean: vec![0.0; num_channels],
            bn_running_var: vec![1.0; num_channels],
            affine_scale,
            affine_shift,
            momentum: cfg.momentum,
            eps: cfg.eps,
            group_eval: cfg.group_eval,
            updates: 0,
        })
    }

    pub fn has_group_stage(&self) -> bool {
        self.kind == NormKind::Continual
    }
}

/// Output of the group stage on `[B, C, D]` input.
pub struct GroupStage {
    /// Normalized features, `[B, C, D]`.
    pub y: Var,
    /// Per-(sample, group) mean, `[B, G, 1]`.
    pub mean: Var,
    /// Per-(sample, group) population variance, `[B, G, 1]`.
    pub var: Var,
}

fn standardize(g: &Graph, x: Var, mean: Var, var: Var, eps: f64) -> Var {
    let inv = g.powf(g.add_scalar(var, eps), -0.5);
    g.mul(g.sub(x, mean), inv)
}

fn standardize_const(g: &Graph, x: Var, mean: &[f64], var: &[f64], shape: &[usize], eps: f64) -> Var {
    let m = g.constant(Tensor::new(shape, mean.to_vec()));
    let inv = g.constant(Tensor::new(shape, var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()));
    g.mul(g.sub(x, m), inv)
}

/// Group normalization of `x: [B, C, D]` with each sample's own moments.
pub fn gn_stage(g: &Graph, x: Var, groups: usize, eps: f64) -> Result<GroupStage> {
    let shape = g.shape(x);
    let [b, c, d] = shape[..] else {
        return Err(Error::Shape(format!("expected [B, C, D], got {shape:?}")));
    };
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels are not divisible into {groups} groups")));
    }
    let xr = g.reshape(x, &[b, groups, (c / groups) * d]);
    let mean = g.mean_axes(xr, &[2]);
    let var = g.var_axes(xr, &[2]);
    let y = g.reshape(standardize(g, xr, mean, var, eps), &[b, c, d]);
    Ok(GroupStage { y, mean, var })
}

/// Value-level group normalization; returns the normalized input and the
/// per-(sample, group) moments as `[B, G]`.
pub fn gn_normalize(x: &Tensor, groups: usize, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let out = gn_stage(&g, xv, groups, eps)?;
    let b = x.shape()[0];
    let y = (*g.value(out.y)).clone();
    let m = (*g.value(out.mean)).clone().reshape(&[b, groups]);
    let v = (*g.value(out.var)).clone().reshape(&[b, groups]);
    Ok((y, m, v))
}

/// Batch statistics observed during one training-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    /// `[B, G]`, absent without a group stage.
    pub gn_mean: Option<Tensor>,
    pub gn_var: Option<Tensor>,
    /// `[C]`.
    pub bn_mean: Tensor,
    pub bn_var: Tensor,
}

/// Differentiable batch statistics of the current input, for matching
/// against saved running moments.
#[derive(Clone, Copy, Debug)]
pub struct CapturedMoments {
    /// `[G]`: per-sample group moments averaged over the batch.
    pub gn_mean: Option<Var>,
    pub gn_var: Option<Var>,
    /// `[C]`: batch-stage moments over `(B, D)`.
    pub bn_mean: Var,
    pub bn_var: Var,
}

pub struct CnOutput {
    pub y: Var,
    pub batch: Option<BatchMoments>,
    pub captured: Option<CapturedMoments>,
}

/// Applies the layer without touching its state. In train mode the returned
/// [`BatchMoments`] carry what [`update_running_moments`] needs; with
/// `capture` set the batch statistics of `x` are also returned as graph
/// values. Captured batch-stage moments are always taken on the per-sample
/// group-normalized features, the same quantity the running estimates track.
pub fn cn_apply(
    g: &Graph,
    x: Var,
    state: &CnLayerState,
    scale: Var,
    shift: Var,
    mode: Mode,
    capture: bool,
) -> Result<CnOutput> {
    let shape = g.shape(x);
    if shape.len() < 3 {
        return Err(Error::Shape(format!("expected [B, C, ...], got {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if c != state.num_channels {
        return Err(Error::Shape(format!(
            "layer has {} channels, input has {c}",
            state.num_channels
        )));
    }
    let d: usize = shape[2..].iter().product();
    let x3 = g.reshape(x, &[b, c, d]);
    let eps = state.eps;
    let gs = state.num_groups;
    if mode == Mode::Eval && state.updates == 0 {
        log::warn!("normalization layer evaluated before any running-moment update");
    }

    // Group stage.
    let mut gn_train = None;
    let y1 = if state.has_group_stage() {
        if mode == Mode::Train || capture || state.group_eval == GroupEvalStats::PerSample {
            gn_train = Some(gn_stage(g, x3, gs, eps)?);
        }
        match (mode, state.group_eval) {
            (Mode::Train, _) | (Mode::Eval, GroupEvalStats::PerSample) => {
                gn_train.as_ref().unwrap().y
            }
            (Mode::Eval, GroupEvalStats::Running) => {
                let xr = g.reshape(x3, &[b, gs, (c / gs) * d]);
                let y = standardize_const(
                    g,
                    xr,
                    &state.gn_running_mean,
                    &state.gn_running_var,
                    &[1, gs, 1],
                    eps,
                );
                g.reshape(y, &[b, c, d])
            }
        }
    } else {
        x3
    };

    // Batch stage.
    let mut batch = None;
    let y2 = match mode {
        Mode::Train => {
            let bm = g.mean_axes(y1, &[0, 2]);
            let bv = g.var_axes(y1, &[0, 2]);
            batch = Some(BatchMoments {
                gn_mean: gn_train.as_ref().map(|s| (*g.value(s.mean)).clone().reshape(&[b, gs])),
                gn_var: gn_train.as_ref().map(|s| (*g.value(s.var)).clone().reshape(&[b, gs])),
                bn_mean: (*g.value(bm)).clone().reshape(&[c]),
                bn_var: (*g.value(bv)).clone().reshape(&[c]),
            });
            standardize(g, y1, bm, bv, eps)
        }
        Mode::Eval => standardize_const(
            g,
            y1,
            &state.bn_running_mean,
            &state.bn_running_var,
            &[1, c, 1],
            eps,
        ),
    };

    let captured = if capture {
        let stage_in = gn_train.as_ref().map_or(x3, |s| s.y);
        let bm = g.mean_axes(stage_in, &[0, 2]);
        let bv = g.var_axes(stage_in, &[0, 2]);
        let flat = |v: Var, n: usize| g.reshape(v, &[n]);
        Some(CapturedMoments {
            gn_mean: gn_train.as_ref().map(|s| flat(g.mean_axes(s.mean, &[0]), gs)),
            gn_var: gn_train.as_ref().map(|s| flat(g.mean_axes(s.var, &[0]), gs)),
            bn_mean: flat(bm, c),
            bn_var: flat(bv, c),
        })
    } else {
        None
    };

    let scale = g.reshape(scale, &[1, c, 1]);
    let shift = g.reshape(shift, &[1, c, 1]);
    let y = g.add(g.mul(y2, scale), shift);
    Ok(CnOutput {
        y: g.reshape(y, &shape),
        batch,
        captured,
    })
}

/// [`cn_apply`] followed, in train mode, by a running-moment update.
pub fn cn_forward(
    g: &Graph,
    x: Var,
    state: &mut CnLayerState,
    scale: Var,
    shift: Var,
    mode: Mode,
) -> Result<Var> {
    let out = cn_apply(g, x, state, scale, shift, mode, false)?;
    if let Some(batch) = &out.batch {
        let momentum = state.momentum;
        update_running_moments(state, batch, momentum)?;
    }
    Ok(out.y)
}

/// `running ← (1 − momentum)·running + momentum·batch` for both stages.
pub fn update_running_moments(
    state: &mut CnLayerState,
    batch: &BatchMoments,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
    }
    let negative = |t: &Tensor| t.data().iter().any(|&v| v < 0.0 || v.is_nan());
    if negative(&batch.bn_var) || batch.gn_var.as_ref().is_some_and(negative) {
        return Err(Error::Numeric("negative batch variance".into()));
    }
    if batch.bn_mean.len() != state.num_channels {
        return Err(Error::Shape("batch-stage moments do not match channel count".into()));
    }
    let blend = |running: &mut [f64], fresh: &[f64]| {
        for (r, f) in running.iter_mut().zip(fresh) {
            *r = (1.0 - momentum) * *r + momentum * f;
        }
    };
    if state.has_group_stage() {
        let (Some(gm), Some(gv)) = (&batch.gn_mean, &batch.gn_var) else {
            return Err(Error::Structure("group-stage moments missing".into()));
        };
        let gm = gm.mean_axes(&[0]);
        let gv = gv.mean_axes(&[0]);
        if gm.len() != state.num_groups {
            return Err(Error::Shape("group moments do not match group count".into()));
        }
        blend(&mut state.gn_running_mean, gm.data());
        blend(&mut state.gn_running_var, gv.data());
    }
    blend(&mut state.bn_running_mean, batch.bn_mean.data());
    blend(&mut state.bn_running_var, batch.bn_var.data());
    state.updates += 1;
    Ok(())
}

/// Frozen running moments of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub gn_mean: Vec<f64>,
    pub gn_var: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

/// Immutable copy of every layer's running moments, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnSnapshot {
    layers: Vec<LayerMoments>,
}

impl CnSnapshot {
    pub fn capture<'a>(states: impl IntoIterator<Item = &'a CnLayerState>) -> Self {
        CnSnapshot {
            layers: states
                .into_iter()
                .map(|s| LayerMoments {
                    gn_mean: s.gn_running_mean.clone(),
                    gn_var: s.gn_running_var.clone(),
                    bn_mean: s.bn_running_mean.clone(),
                    bn_var: s.bn_running_var.clone(),
                })
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerMoments>) -> Self {
        CnSnapshot { layers }
    }

    pub fn layers(&self) -> &[LayerMoments] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
