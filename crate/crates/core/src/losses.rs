//! Training losses: cosine cross-entropy, margin ranking against new
//! classes, centroid contrast between synthetic and real domains, and
//! feature distillation.

use dfcil_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::NORM_EPS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub dist: f64,
    pub idc: f64,
    pub margin: f64,
    /// Hinge margin `m`.
    pub margin_m: f64,
    /// Contrast temperature `tau`.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dist: 5.0,
            idc: 1.0,
            margin: 1.0,
            margin_m: 0.5,
            tau: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dist, self.idc, self.margin, self.margin_m];
        if all.iter().any(|v| !(*v >= 0.0)) || !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(
                "loss weights and margin must be ≥ 0 and tau > 0".into(),
            ));
        }
        Ok(())
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Shape(format!("label {l} outside {k} classes")));
        }
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mask = g.constant(one_hot(labels, shape[1])?);
    let picked = g.sum(g.mul(g.log_softmax(logits), mask));
    Ok(g.mul_scalar(picked, -1.0 / labels.len() as f64))
}

/// Cosine similarities `⟨θ̄_k, f̄_b⟩`, shape `[B, K]`.
pub fn cosine_matrix(g: &Graph, f: Var, theta: Var) -> Var {
    let fb = g.row_normalize(f, NORM_EPS);
    let tb = g.row_normalize(theta, NORM_EPS);
    g.matmul_t(fb, tb, false, true)
}

/// Cross-entropy over temperature-scaled cosine logits.
pub fn cn_ce_loss(g: &Graph, f: Var, theta: Var, eta: Var, labels: &[usize]) -> Result<Var> {
    let z = g.mul(cosine_matrix(g, f, theta), eta);
    cross_entropy(g, z, labels)
}

/// Hinge `max(m − ⟨θ̄_y, f̄⟩ + ⟨θ̄_k, f̄⟩, 0)` summed over the negative
/// classes `negatives` and averaged over anchors.
pub fn margin_loss(
    g: &Graph,
    anchors: Var,
    labels: &[usize],
    theta: Var,
    negatives: &[usize],
    m: f64,
) -> Result<Var> {
    let k = g.shape(theta)[0];
    if negatives.is_empty() || labels.is_empty() {
        if negatives.is_empty() {
            log::warn!("margin loss has no negative classes");
        }
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    if let Some(&bad) = negatives.iter().find(|&&c| c >= k) {
        return Err(Error::Shape(format!("negative class {bad} outside {k} classes")));
    }
    if labels.iter().any(|l| negatives.contains(l)) {
        return Err(Error::Config("margin anchor labelled with a negative class".into()));
    }
    let cos = cosine_matrix(g, anchors, theta);
    let pos = g.sum_axes(g.mul(cos, g.constant(one_hot(labels, k)?)), &[1]);
    let mut neg_mask = Tensor::zeros(&[1, k]);
    for &c in negatives {
        neg_mask.data_mut()[c] = 1.0;
    }
    let hinge = g.relu(g.add_scalar(g.sub(cos, pos), m));
    let total = g.sum(g.mul(hinge, g.constant(neg_mask)));
    Ok(g.mul_scalar(total, 1.0 / labels.len() as f64))
}

/// Mean of `1 − cos(old_b, new_b)` over the batch.
pub fn distillation_loss(g: &Graph, old: Var, new: Var) -> Result<Var> {
    let (so, sn) = (g.shape(old), g.shape(new));
    if so != sn || so.len() != 2 {
        return Err(Error::Shape(format!("feature shapes {so:?} and {sn:?} differ")));
    }
    if so[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let cos = g.sum_axes(g.mul(g.row_normalize(old, NORM_EPS), g.row_normalize(new, NORM_EPS)), &[1]);
    Ok(g.add_scalar(g.neg(g.mean(cos)), 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Synthesized images.
    Source,
    /// Real images of the current task.
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Unit-normalized per-class mean features; row `i` belongs to `classes[i]`.
#[derive(Clone, Copy, Debug)]
pub struct Centroids {
    pub domain: Domain,
    pub vectors: Var,
}

#[derive(Clone, Debug)]
pub struct CentroidSet {
    pub domain: Domain,
    pub classes: Vec<usize>,
    pub centroids: Centroids,
}

impl CentroidSet {
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Class means below this norm are treated as degenerate.
pub const CENTROID_MIN_NORM: f64 = 1e-6;

/// Per-class mean of `features` rows, then unit-normalized. Classes with no
/// samples or a vanishing mean are skipped with a warning.
pub fn class_centroids(
    g: &Graph,
    features: Var,
    labels: &[usize],
    covered: &[usize],
    domain: Domain,
) -> Result<CentroidSet> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for features of shape {shape:?}",
            labels.len()
        )));
    }
    let n = labels.len();
    let fv = g.value(features);
    let mut kept = Vec::new();
    let mut avg = Vec::new();
    for &c in covered {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            log::warn!("class {c} has no {} samples; centroid skipped", domain.as_str());
            continue;
        }
        let w = 1.0 / members.len() as f64;
        let mut row = vec![0.0; n];
        let mut mean = vec![0.0; shape[1]];
        for &i in &members {
            row[i] = w;
            for (m, v) in mean.iter_mut().zip(&fv.data()[i * shape[1]..(i + 1) * shape[1]]) {
                *m += w * v;
            }
        }
        if mean.iter().map(|v| v * v).sum::<f64>().sqrt() < CENTROID_MIN_NORM {
            log::warn!("class {c} {} centroid vanishes; skipped", domain.as_str());
            continue;
        }
        kept.push(c);
        avg.extend(row);
    }
    let a = g.constant(Tensor::new(&[kept.len(), n], avg));
    let vectors = g.row_normalize(g.matmul(a, features), 0.0);
    Ok(CentroidSet {
        domain,
        classes: kept,
        centroids: Centroids { domain, vectors },
    })
}

fn rows_for(g: &Graph, set: &CentroidSet, classes: &[usize]) -> Result<Var> {
    let mut sel = Tensor::zeros(&[classes.len(), set.classes.len()]);
    for (i, &c) in classes.iter().enumerate() {
        let j = set.row_of(c).ok_or(Error::Coverage {
            class: c,
            domain: set.domain.as_str(),
        })?;
        sel.data_mut()[i * set.classes.len() + j] = 1.0;
    }
    Ok(g.matmul(g.constant(sel), set.centroids.vectors))
}

/// Contrastive alignment of source and target centroids over `classes`.
/// For each class `k` the positive pair is `(c̄_k^S, c̄_k^T)`; negatives are
/// every `c̄_j^S` and `c̄_j^T` with `j ≠ k`, all compared against `c̄_k^T`.
pub fn idc_loss(
    g: &Graph,
    source: &CentroidSet,
    target: &CentroidSet,
    tau: f64,
    classes: &[usize],
) -> Result<Var> {
    if classes.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = rows_for(g, source, classes)?;
    let t = rows_for(g, target, classes)?;
    let k = classes.len();
    let eye = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
    let off = eye.map(|v| 1.0 - v);
    // Entry (j, k) compares domain centroid j against target centroid k.
    // Cosines are at most 1, so subtracting tau keeps every exponent ≤ 0.
    let st = g.mul_scalar(g.matmul_t(s, t, false, true), tau);
    let tt = g.mul_scalar(g.matmul_t(t, t, false, true), tau);
    let e_st = g.exp(g.add_scalar(st, -tau));
    let e_tt = g.mul(g.exp(g.add_scalar(tt, -tau)), g.constant(off));
    let denom = g.add(g.sum_axes(e_st, &[0]), g.sum_axes(e_tt, &[0]));
    let pos = g.add_scalar(g.sum_axes(g.mul(st, g.constant(eye)), &[0]), -tau);
    Ok(g.mean(g.sub(g.ln(denom), pos)))
}

/// Argmax over each row of class scores.
pub fn pseudo_labels(logits: &Tensor) -> Vec<usize> {
    logits.argmax_rows()
}

/// Loss terms of one training step; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub dist: Option<Var>,
    pub idc: Option<Var>,
    pub margin: Option<Var>,
}

/// Scalar values of each term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cn_ce: f64,
    pub dist: f64,
    pub idc: f64,
    pub margin: f64,
    pub total: f64,
}

/// `ce + α_dist·dist + α_idc·idc + α_margin·margin`.
pub fn total_loss(g: &Graph, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossValues)> {
    let read = |name: &str, v: Option<Var>| -> Result<f64> {
        let x = v.map_or(0.0, |v| g.scalar_value(v));
        if !x.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite")));
        }
        Ok(x)
    };
    let mut vals = LossValues {
        cn_ce: read("cn_ce", Some(terms.ce))?,
        dist: read("dist", terms.dist)?,
        idc: read("idc", terms.idc)?,
        margin: read("margin", terms.margin)?,
        total: 0.0,
    };
    let mut total = terms.ce;
    for (v, a) in [(terms.dist, w.dist), (terms.idc, w.idc), (terms.margin, w.margin)] {
        if let Some(v) = v {
            if a != 0.0 {
                total = g.add(total, g.mul_scalar(v, a));
            }
        }
    }
    vals.total = combine(&vals, w);
    Ok((total, vals))
}

/// Weighted total of precomputed component values.
pub fn combine(v: &LossValues, w: &LossWeights) -> f64 {
    v.cn_ce + w.dist * v.dist + w.idc * v.idc + w.margin * v.margin
}
