//! Slot attention with learnable query initialisation.
//!
//! Each frame is parsed independently: the slots start as copies of the
//! learnable queries, compete for feature locations through a softmax over
//! the slot axis, and are refined by a shared GRU for a fixed number of
//! iterations. All frames of a batch are processed together as one leading
//! axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Gru, LayerNorm, Mlp};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Stabiliser in the denominator of the per-slot weighted mean.
pub const WEIGHTED_MEAN_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotConfig {
    pub n_slots: usize,
    pub dim: usize,
    pub iterations: usize,
    pub input_norm: bool,
    pub slot_norm: bool,
    pub post_mlp: bool,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            n_slots: 8,
            dim: 64,
            iterations: 3,
            input_norm: true,
            slot_norm: true,
            post_mlp: true,
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::config("slot attention needs at least one slot"));
        }
        if self.iterations == 0 {
            return Err(Error::config("slot attention needs at least one iteration"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub cfg: SlotConfig,
    /// `[N, D]`
    pub queries: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub gru: Gru,
    pub input_norm: Option<LayerNorm>,
    pub slot_norm: Option<LayerNorm>,
    pub mlp_norm: Option<LayerNorm>,
    pub mlp: Option<Mlp>,
}

/// Graph handles produced by [`SlotAttention::decompose`].
#[derive(Clone, Debug)]
pub struct SlotVars {
    /// `[F, N, D]` final-iteration slots.
    pub tokens: Var,
    /// `[F, N, HW]` final-iteration attention.
    pub attn: Var,
    /// Attention of every iteration, first to last.
    pub attn_per_iter: Vec<Var>,
}

/// Detached slot-attention result for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotOutput {
    /// `[T, N, D]`
    pub tokens: Tensor,
    /// `[T, N, HW]`
    pub attn: Tensor,
}

impl SlotAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: SlotConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let queries = store.add(format!("{name}.queries"), Tensor::normal(&[cfg.n_slots, d], 0.0, std, rng));
        let w_q = store.add(format!("{name}.w_q"), fan_in_uniform(&[d, d], d, rng));
        let w_k = store.add(format!("{name}.w_k"), fan_in_uniform(&[d, d], d, rng));
        let w_v = store.add(format!("{name}.w_v"), fan_in_uniform(&[d, d], d, rng));
        let gru = Gru::new(store, &format!("{name}.gru"), d, rng);
        let input_norm = cfg.input_norm.then(|| LayerNorm::new(store, &format!("{name}.input_norm"), d));
        let slot_norm = cfg.slot_norm.then(|| LayerNorm::new(store, &format!("{name}.slot_norm"), d));
        let (mlp_norm, mlp) = if cfg.post_mlp {
            (
                Some(LayerNorm::new(store, &format!("{name}.mlp_norm"), d)),
                Some(Mlp::new(store, &format!("{name}.mlp"), [d, d, d], rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            queries,
            w_q,
            w_k,
            w_v,
            gru,
            input_norm,
            slot_norm,
            mlp_norm,
            mlp,
        })
    }

    fn keys_values(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let f = match &self.input_norm {
            Some(ln) => ln.forward(g, p, features)?,
            None => features,
        };
        let k = g.matmul(f, p.get(self.w_k))?;
        let v = g.matmul(f, p.get(self.w_v))?;
        let rank = g.shape(k).len();
        let k_t = g.transpose(k, rank - 2, rank - 1)?;
        Ok((k_t, v))
    }

    /// One routing iteration given transposed keys `[F, D, HW]` and values
    /// `[F, HW, D]`. Returns the updated slots and the attention `Ã`.
    fn iterate(&self, g: &mut Graph, p: &Bound, slots: Var, keys_t: Var, values: Var) -> Result<(Var, Var)> {
        let d = self.cfg.dim;
        let s = match &self.slot_norm {
            Some(ln) => ln.forward(g, p, slots)?,
            None => slots,
        };
        let q = g.matmul(s, p.get(self.w_q))?;
        let logits = g.bmm(q, keys_t)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let slot_axis = g.shape(logits).len() - 2;
        let attn = g.softmax(logits, slot_axis)?;

        // weighted mean over locations: M = Ã / (Σ_locations Ã + ε)
        let loc_axis = slot_axis + 1;
        let mass = g.sum_axis(attn, loc_axis)?;
        let mut keep = g.shape(mass).to_vec();
        keep.push(1);
        let mass = g.reshape(mass, &keep)?;
        let mass = g.add_scalar(mass, WEIGHTED_MEAN_EPS);
        let weights = g.div(attn, mass)?;
        let updates = g.bmm(weights, values)?;

        let mut next = self.gru.forward(g, p, updates, slots)?;
        if let (Some(ln), Some(mlp)) = (&self.mlp_norm, &self.mlp) {
            let h = ln.forward(g, p, next)?;
            let h = mlp.forward(g, p, h)?;
            next = g.add(next, h)?;
        }
        Ok((next, attn))
    }

    /// A single routing step on one frame: `slots[N, D]`, `features[HW, D]`.
    pub fn slot_step(&self, g: &mut Graph, p: &Bound, slots: Var, features: Var) -> Result<(Var, Var)> {
        self.check_features(g.shape(features), 2)?;
        if g.shape(slots) != [self.cfg.n_slots, self.cfg.dim] {
            return Err(Error::shape("slot_step", &[self.cfg.n_slots, self.cfg.dim], g.shape(slots)));
        }
        let hw = g.shape(features)[0];
        let f = g.reshape(features, &[1, hw, self.cfg.dim])?;
        let s = g.reshape(slots, &[1, self.cfg.n_slots, self.cfg.dim])?;
        let (k_t, v) = self.keys_values(g, p, f)?;
        let (next, attn) = self.iterate(g, p, s, k_t, v)?;
        let next = g.reshape(next, &[self.cfg.n_slots, self.cfg.dim])?;
        let attn = g.reshape(attn, &[self.cfg.n_slots, hw])?;
        Ok((next, attn))
    }

    fn check_features(&self, shape: &[usize], rank: usize) -> Result<()> {
        if shape.len() != rank || shape[rank - 1] != self.cfg.dim {
            return Err(Error::shape("slot_attention", &[self.cfg.dim], shape));
        }
        Ok(())
    }

    /// Decomposes every frame of `features[F, HW, D]` into `N` slots.
    pub fn decompose(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<SlotVars> {
        self.check_features(g.shape(features), 3)?;
        let frames = g.shape(features)[0];
        let (k_t, v) = self.keys_values(g, p, features)?;
        let mut slots = g.broadcast_to(p.get(self.queries), &[frames, self.cfg.n_slots, self.cfg.dim])?;
        let mut attn_per_iter = Vec::with_capacity(self.cfg.iterations);
        for _ in 0..self.cfg.iterations {
            let (next, attn) = self.iterate(g, p, slots, k_t, v)?;
            slots = next;
            attn_per_iter.push(attn);
        }
        Ok(SlotVars {
            tokens: slots,
            attn: *attn_per_iter.last().expect("at least one iteration"),
            attn_per_iter,
        })
    }

    /// Inference-only convenience wrapper around [`Self::decompose`].
    pub fn decompose_detached(&self, store: &ParamStore, features: &Tensor) -> Result<SlotOutput> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features.clone());
        let out = self.decompose(&mut g, &p, f)?;
        Ok(SlotOutput {
            tokens: g.value(out.tokens).clone(),
            attn: g.value(out.attn).clone(),
        })
    }
}
