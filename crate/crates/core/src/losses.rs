//! Training objectives: object distillation, temporal reasoning, action
//! classification and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature inside the correspondence score.
    pub tau: f64,
    /// Temperature of the contrastive softmax; `None` reuses `tau`.
    pub tau_outer: Option<f64>,
    /// Hinge margin of the temporal reasoning loss.
    pub margin: f64,
    /// Average each temporal term over its pairs instead of summing.
    pub normalize_temporal: bool,
    /// Cap on cls negatives per clip; `None` uses every other clip.
    pub max_negatives: Option<usize>,
    pub enable_obj: bool,
    pub enable_temp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            tau_outer: None,
            margin: 1.0,
            normalize_temporal: true,
            max_negatives: None,
            enable_obj: true,
            enable_temp: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let outer = self.outer_tau();
        if !(self.tau > 0.0 && outer > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin must be non-negative"));
        }
        if self.max_negatives == Some(0) {
            return Err(Error::config("negative cap must be at least 1"));
        }
        Ok(())
    }

    pub fn outer_tau(&self) -> f64 {
        self.tau_outer.unwrap_or(self.tau)
    }
}

/// Per-clip graph handles consumed by the losses.
#[derive(Clone, Copy, Debug)]
pub struct ClipTerms {
    /// `[T, N, D]`
    pub tokens: Var,
    /// `[T, D]`
    pub cls: Var,
    /// `[T', N, D]`
    pub states: Var,
    /// `[K]`
    pub logits: Var,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct BatchContext {
    pub clips: Vec<ClipTerms>,
    pub cfg: LossConfig,
}

impl BatchContext {
    /// Other clips sharing clip `i`'s label.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        let label = self.clips[i].label;
        (0..self.clips.len())
            .filter(|&j| j != i && self.clips[j].label == label)
            .collect()
    }

    /// Clips whose label differs from clip `i`'s.
    pub fn negatives(&self, i: usize) -> Vec<usize> {
        let label = self.clips[i].label;
        (0..self.clips.len()).filter(|&j| self.clips[j].label != label).collect()
    }

    /// Clips whose cls tokens serve as negatives for clip `i`: every other
    /// clip, taken cyclically after `i` up to the configured cap.
    pub fn cls_negatives(&self, i: usize) -> Vec<usize> {
        let b = self.clips.len();
        let cap = self.cfg.max_negatives.unwrap_or(usize::MAX);
        (1..b).map(|k| (i + k) % b).take(cap).collect()
    }
}

/// Correspondence score between object tokens `o[..., N, D]` and a global
/// vector `p[..., D]`: cosine similarities weighted by their softmax at
/// temperature `tau`. Returns `[...]`.
pub fn correspondence(g: &mut Graph, tokens: Var, cls: Var, tau: f64) -> Result<Var> {
    let ts = g.shape(tokens).to_vec();
    let ps = g.shape(cls).to_vec();
    let r = ts.len();
    if r < 2 || ps.len() != r - 1 || ps[..r - 2] != ts[..r - 2] || ps[r - 2] != ts[r - 1] {
        return Err(Error::shape("correspondence", &ts, &ps));
    }
    let mut with_slot = ps.clone();
    with_slot.insert(r - 2, 1);
    let p = g.reshape(cls, &with_slot)?;
    let p = g.broadcast_to(p, &ts)?;
    let cos = g.cosine_similarity(tokens, p, r - 1)?;
    let logits = g.scale(cos, 1.0 / tau);
    let weights = g.softmax(logits, r - 2)?;
    let weighted = g.mul(weights, cos)?;
    g.sum_axis(weighted, r - 2)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Contrastive alignment of each frame's object tokens with its own cls
/// vector against cls vectors of other clips at the same frame index.
/// Summed over frames, averaged over clips.
pub fn object_distillation_loss(g: &mut Graph, ctx: &BatchContext) -> Result<Var> {
    let tau = ctx.cfg.tau;
    let outer = ctx.cfg.outer_tau();
    let mut per_clip = Vec::with_capacity(ctx.clips.len());
    for (i, clip) in ctx.clips.iter().enumerate() {
        let negs = ctx.cls_negatives(i);
        if negs.is_empty() {
            return Err(Error::config("object distillation needs at least one negative cls vector"));
        }
        let t = g.shape(clip.tokens)[0];
        let pos = correspondence(g, clip.tokens, clip.cls, tau)?;
        let mut cols = vec![g.reshape(pos, &[t, 1])?];
        for j in negs {
            let other = ctx.clips[j].cls;
            if g.shape(other) != g.shape(clip.cls) {
                return Err(Error::shape("object_distillation_loss", g.shape(clip.cls), g.shape(other)));
            }
            let c = correspondence(g, clip.tokens, other, tau)?;
            cols.push(g.reshape(c, &[t, 1])?);
        }
        let logits = g.concat(&cols, 1)?;
        let logits = g.scale(logits, 1.0 / outer);
        let ce = g.cross_entropy(logits, &vec![0; t])?;
        per_clip.push(g.scale(ce, t as f64));
    }
    mean_of(g, &per_clip)
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        return Ok(zero(g));
    }
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Sum (or mean) of `‖a - b‖₂` over the last axis.
fn distance_term(g: &mut Graph, a: Var, b: Var, margin: Option<f64>, normalize: bool) -> Result<(Var, usize)> {
    let diff = g.sub(a, b)?;
    let last = g.shape(diff).len() - 1;
    let dist = g.l2_norm(diff, last)?;
    let count = g.value(dist).numel();
    let term = match margin {
        Some(m) => {
            let neg = g.neg(dist);
            let gap = g.add_scalar(neg, m);
            g.relu(gap)
        }
        None => dist,
    };
    let s = g.sum(term);
    Ok(if normalize { (g.scale(s, 1.0 / count as f64), count) } else { (s, count) })
}

/// Temporal reasoning loss for one query clip against explicit pools.
/// Positives pull same-slot state changes together; cross-clip negatives
/// and other slots of the same clip are pushed at least `margin` apart.
pub fn temporal_reasoning_query(
    g: &mut Graph,
    query: Var,
    positives: &[Var],
    negatives: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = g.shape(query).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("temporal_reasoning_loss", &[0, 0, 0], &shape));
    }
    for &other in positives.iter().chain(negatives) {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::shape("temporal_reasoning_loss", &shape, g.shape(other)));
        }
    }
    let norm = cfg.normalize_temporal;
    let mut terms = Vec::new();

    let mut pool = |g: &mut Graph, others: &[Var], margin: Option<f64>| -> Result<()> {
        if others.is_empty() {
            return Ok(());
        }
        let mut parts = Vec::with_capacity(others.len());
        for &o in others {
            parts.push(distance_term(g, query, o, margin, false)?.0);
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        if norm {
            let pairs = others.len() * shape[0] * shape[1];
            total = g.scale(total, 1.0 / pairs as f64);
        }
        terms.push(total);
        Ok(())
    };
    pool(g, positives, None)?;
    pool(g, negatives, Some(cfg.margin))?;

    let n = shape[1];
    if n > 1 {
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    first.push(a);
                    second.push(b);
                }
            }
        }
        let lhs = g.index_select(query, 1, &first)?;
        let rhs = g.index_select(query, 1, &second)?;
        terms.push(distance_term(g, lhs, rhs, Some(cfg.margin), norm)?.0);
    }
    if terms.is_empty() {
        return Ok(zero(g));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Temporal reasoning loss averaged over every clip of the batch as query.
pub fn temporal_reasoning_loss(g: &mut Graph, ctx: &BatchContext) -> Result<Var> {
    let mut per_clip = Vec::with_capacity(ctx.clips.len());
    for i in 0..ctx.clips.len() {
        let pos: Vec<Var> = ctx.positives(i).into_iter().map(|j| ctx.clips[j].states).collect();
        let neg: Vec<Var> = ctx.negatives(i).into_iter().map(|j| ctx.clips[j].states).collect();
        per_clip.push(temporal_reasoning_query(g, ctx.clips[i].states, &pos, &neg, &ctx.cfg)?);
    }
    mean_of(g, &per_clip)
}

/// Mean cross-entropy of every clip's logits against its label.
pub fn classification_loss(g: &mut Graph, ctx: &BatchContext) -> Result<Var> {
    let mut rows = Vec::with_capacity(ctx.clips.len());
    for c in &ctx.clips {
        let k = g.value(c.logits).numel();
        rows.push(g.reshape(c.logits, &[1, k])?);
    }
    let logits = g.concat(&rows, 0)?;
    let labels: Vec<usize> = ctx.clips.iter().map(|c| c.label).collect();
    g.cross_entropy(logits, &labels)
}

/// Loss terms as graph handles.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub obj: Var,
    pub temp: Var,
    pub cls: Var,
    pub total: Var,
}

/// Loss terms as numbers, in the key layout of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    #[serde(rename = "L_obj")]
    pub obj: f64,
    #[serde(rename = "L_temp")]
    pub temp: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            obj: g.value(self.obj).item(),
            temp: g.value(self.temp).item(),
            cls: g.value(self.cls).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `L_obj + L_temp + L_cls`; disabled terms contribute a constant zero.
pub fn total_loss(g: &mut Graph, ctx: &BatchContext) -> Result<LossVars> {
    ctx.cfg.validate()?;
    let obj = if ctx.cfg.enable_obj {
        object_distillation_loss(g, ctx)?
    } else {
        zero(g)
    };
    let temp = if ctx.cfg.enable_temp {
        temporal_reasoning_loss(g, ctx)?
    } else {
        zero(g)
    };
    let cls = classification_loss(g, ctx)?;
    let partial = g.add(obj, temp)?;
    let total = g.add(partial, cls)?;
    Ok(LossVars { obj, temp, cls, total })
}
