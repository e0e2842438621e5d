//! Object-time interaction: per-frame self-attention over object tokens,
//! per-object state changes across an interval δ, pooling and the linear
//! classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Which time pairs feed the state-change layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Pairs `(t, t + δ)` for one fixed δ.
    Fixed(usize),
    /// Every δ in `1..T`, stacked along time: `T(T-1)/2` rows.
    All,
}

impl DeltaMode {
    /// Number of state-change rows produced for a clip of `t` frames.
    pub fn rows(self, t: usize) -> Result<usize> {
        match self {
            DeltaMode::Fixed(d) => {
                check_delta(d, t)?;
                Ok(t - d)
            }
            DeltaMode::All => {
                if t < 2 {
                    return Err(Error::config("state changes need at least two frames"));
                }
                Ok(t * (t - 1) / 2)
            }
        }
    }

    /// Default interval `T/4`, at least 1.
    pub fn default_for(t: usize) -> Self {
        DeltaMode::Fixed((t / 4).max(1))
    }
}

pub fn check_delta(delta: usize, t: usize) -> Result<()> {
    if delta == 0 {
        return Err(Error::config("temporal interval must be at least 1"));
    }
    if delta >= t {
        return Err(Error::config(format!(
            "temporal interval exceeds clip length (δ = {delta}, T = {t})"
        )));
    }
    Ok(())
}

/// Temporal module applied to object tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModule {
    /// Concatenate initial/final states and apply a 2D-D-D perceptron.
    #[default]
    StateChange,
    /// Attention over time per object. Not provided.
    TemporalAttention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteractionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub temporal: TemporalModule,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            depth: 1,
            n_classes: 6,
            temporal: TemporalModule::StateChange,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "{} attention heads do not divide D = {}",
                self.heads, self.dim
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("classification needs at least two classes"));
        }
        if self.temporal == TemporalModule::TemporalAttention {
            return Err(Error::config(
                "temporal attention over object tokens is not implemented; use state_change",
            ));
        }
        Ok(())
    }
}

/// Pre-norm Transformer encoder layer over the slot axis.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), [dim, dim * ffn_mult, dim], rng),
        }
    }

    /// `x[F, N, D] -> [F, N, D]`, attention confined to each leading index.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (f, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let y = self.ln1.forward(g, p, x)?;
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[f, n, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.q.forward(g, p, y)?;
        let q = split(g, q)?;
        let k = self.k.forward(g, p, y)?;
        let k = split(g, k)?;
        let v = self.v.forward(g, p, y)?;
        let v = split(g, v)?;
        let k_t = g.transpose(k, 2, 3)?;
        let scores = g.bmm(q, k_t)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores, 3)?;
        let ctx = g.bmm(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[f, n, d])?;
        let attn_out = self.out.forward(g, p, ctx)?;
        let x = g.add(x, attn_out)?;
        let y = self.ln2.forward(g, p, x)?;
        let y = self.ffn.forward(g, p, y)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct ObjectTime {
    pub cfg: InteractionConfig,
    pub layers: Vec<EncoderLayer>,
    /// 2D → D → D
    pub state_mlp: Mlp,
    pub head: Linear,
}

impl ObjectTime {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: InteractionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.depth)
            .map(|i| EncoderLayer::new(store, &format!("{name}.interact{i}"), d, cfg.heads, cfg.ffn_mult, rng))
            .collect();
        let state_mlp = Mlp::new(store, &format!("{name}.state"), [2 * d, d, d], rng);
        let head = Linear::new(store, &format!("{name}.head"), d, cfg.n_classes, true, rng);
        Ok(Self {
            cfg,
            layers,
            state_mlp,
            head,
        })
    }

    /// Object interaction within each frame. `tokens[..., N, D]`; every
    /// leading index is an independent frame.
    pub fn object_interact(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.cfg.dim || shape[shape.len() - 2] == 0 {
            return Err(Error::shape("object_interact", &[self.cfg.dim], &shape));
        }
        let r = shape.len();
        let frames: usize = shape[..r - 2].iter().product();
        let mut x = g.reshape(tokens, &[frames, shape[r - 2], shape[r - 1]])?;
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        g.reshape(x, &shape)
    }

    /// State changes of every object between `t` and `t + δ`.
    /// `states[..., T, N, D] -> [..., T', N, D]`.
    pub fn state_changes(&self, g: &mut Graph, p: &Bound, states: Var, mode: DeltaMode) -> Result<Var> {
        let shape = g.shape(states).to_vec();
        if shape.len() < 3 || shape[shape.len() - 1] != self.cfg.dim {
            return Err(Error::shape("state_changes", &[self.cfg.dim], &shape));
        }
        let time_axis = shape.len() - 3;
        let t = shape[time_axis];
        mode.rows(t)?;
        let deltas: Vec<usize> = match mode {
            DeltaMode::Fixed(d) => vec![d],
            DeltaMode::All => (1..t).collect(),
        };
        let mut pieces = Vec::with_capacity(deltas.len());
        for d in deltas {
            let initial = g.narrow(states, time_axis, 0, t - d)?;
            let last = g.narrow(states, time_axis, d, t - d)?;
            let pair = g.concat(&[initial, last], shape.len() - 1)?;
            pieces.push(self.state_mlp.forward(g, p, pair)?);
        }
        if pieces.len() == 1 {
            Ok(pieces[0])
        } else {
            g.concat(&pieces, time_axis)
        }
    }

    /// Mean over time, then over objects: `s[..., T', N, D] -> [..., D]`.
    pub fn pool_video(&self, g: &mut Graph, states: Var) -> Result<Var> {
        pool_video(g, states)
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, video: Var) -> Result<Var> {
        self.head.forward(g, p, video)
    }
}

/// Mean over the time axis, then over the object axis.
pub fn pool_video(g: &mut Graph, states: Var) -> Result<Var> {
    let rank = g.shape(states).len();
    if rank < 3 {
        return Err(Error::shape("pool_video", &[0, 0, 0], g.shape(states)));
    }
    let over_time = g.mean_axis(states, rank - 3)?;
    g.mean_axis(over_time, rank - 3)
}

/// Detached state-change matrix with its interval.
#[derive(Clone, Debug, PartialEq)]
pub struct StateChangeMatrix {
    /// `[T', N, D]`
    pub s: Tensor,
    pub delta: DeltaMode,
}

impl StateChangeMatrix {
    /// Mean L2 norm of each object's state-change vectors over time.
    pub fn slot_norms(&self) -> Vec<f64> {
        let sh = self.s.shape();
        let (tp, n, d) = (sh[0], sh[1], sh[2]);
        (0..n)
            .map(|slot| {
                (0..tp)
                    .map(|t| {
                        let off = (t * n + slot) * d;
                        self.s.data()[off..off + d].iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .sum::<f64>()
                    / tp as f64
            })
            .collect()
    }
}
