//! The full adaptation head wired end to end:
//! frozen features → temporal fusion → slot attention → object interaction →
//! state changes → pooling → classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrameFeatures, StubEncoder, TemporalFusion, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{total_loss, BatchContext, ClipTerms, LossConfig, LossVars};
use crate::object_time::{check_delta, DeltaMode, InteractionConfig, ObjectTime, StateChangeMatrix, TemporalModule};
use crate::params::{Bound, ParamStore};
use crate::slot_attention::{SlotAttention, SlotConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub n_slots: usize,
    pub dim: usize,
    pub delta: DeltaMode,
    pub patch: usize,
    pub channels: usize,
    pub iterations: usize,
    pub heads: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            n_slots: 8,
            dim: 64,
            delta: DeltaMode::Fixed(2),
            patch: 8,
            channels: 3,
            iterations: 3,
            heads: 4,
            depth: 1,
            n_classes: 6,
            encoder_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("clips need at least 2 frames"));
        }
        if let DeltaMode::Fixed(d) = self.delta {
            check_delta(d, self.frames)?;
        }
        self.slot_config().validate()?;
        self.interaction_config().validate()
    }

    pub fn slot_config(&self) -> SlotConfig {
        SlotConfig {
            n_slots: self.n_slots,
            dim: self.dim,
            iterations: self.iterations,
            ..SlotConfig::default()
        }
    }

    pub fn interaction_config(&self) -> InteractionConfig {
        InteractionConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_mult: 4,
            depth: self.depth,
            n_classes: self.n_classes,
            temporal: TemporalModule::StateChange,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub fusion: TemporalFusion,
    pub slots: SlotAttention,
    pub object_time: ObjectTime,
    pub encoder: StubEncoder,
}

/// Graph handles of one batched forward pass over `B` clips.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, T, N, D]` slot tokens.
    pub tokens: Var,
    /// `[B, T, D]`
    pub cls: Var,
    /// `[B*T, N, HW]` final slot attention.
    pub attn: Var,
    /// `[B, T', N, D]`
    pub states: Var,
    /// `[B, K]`
    pub logits: Var,
}

/// Detached per-clip outputs used for evaluation and mask export.
#[derive(Clone, Debug)]
pub struct ClipAnalysis {
    pub logits: Vec<f64>,
    /// `[T, N, HW]`
    pub attn: Tensor,
    pub states: StateChangeMatrix,
}

impl ClipAnalysis {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fusion = TemporalFusion::new(&mut store, "fusion", cfg.dim);
        let slots = SlotAttention::new(&mut store, "slots", cfg.slot_config(), &mut rng)?;
        let object_time = ObjectTime::new(&mut store, "object_time", cfg.interaction_config(), &mut rng)?;
        let encoder = StubEncoder::new(cfg.channels, cfg.patch, cfg.dim, cfg.encoder_seed)?;
        Ok(Self {
            cfg,
            store,
            fusion,
            slots,
            object_time,
            encoder,
        })
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<FrameFeatures> {
        if clip.num_frames() != self.cfg.frames {
            return Err(Error::config(format!(
                "model expects {} frames, clip has {}",
                self.cfg.frames,
                clip.num_frames()
            )));
        }
        self.encoder.encode(clip)
    }

    fn check_batch(&self, batch: &[&FrameFeatures]) -> Result<(usize, usize)> {
        let first = batch.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (t, hw) = (first.num_frames(), first.h * first.w);
        for f in batch {
            if f.num_frames() != self.cfg.frames || f.dim() != self.cfg.dim || f.h * f.w != hw {
                return Err(Error::shape(
                    "model.forward",
                    &[self.cfg.frames, hw, self.cfg.dim],
                    f.grid.shape(),
                ));
            }
        }
        Ok((t, hw))
    }

    /// Batched forward pass.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&FrameFeatures]) -> Result<ForwardVars> {
        let (t, hw) = self.check_batch(batch)?;
        let (b, d, n) = (batch.len(), self.cfg.dim, self.cfg.n_slots);
        let grids: Vec<Tensor> = batch.iter().map(|f| f.grid.clone()).collect();
        let cls: Vec<Tensor> = batch.iter().map(|f| f.cls.clone()).collect();
        let grid = g.constant(Tensor::stack(&grids)?);
        let cls = g.constant(Tensor::stack(&cls)?);

        // time-major so every clip shares the temporal convolution
        let x = g.permute(grid, &[1, 0, 2, 3])?;
        let x = g.reshape(x, &[t, b * hw, d])?;
        let x = self.fusion.forward(g, p, x)?;
        let x = g.reshape(x, &[t, b, hw, d])?;
        let x = g.permute(x, &[1, 0, 2, 3])?;
        let x = g.reshape(x, &[b * t, hw, d])?;

        let slots = self.slots.decompose(g, p, x)?;
        let tokens = g.reshape(slots.tokens, &[b, t, n, d])?;
        let interacted = self.object_time.object_interact(g, p, tokens)?;
        let states = self.object_time.state_changes(g, p, interacted, self.cfg.delta)?;
        let video = self.object_time.pool_video(g, states)?;
        let logits = self.object_time.classify(g, p, video)?;
        Ok(ForwardVars {
            tokens,
            cls,
            attn: slots.attn,
            states,
            logits,
        })
    }

    /// Per-clip views of a batched forward pass, ready for the losses.
    pub fn clip_terms(&self, g: &mut Graph, fwd: &ForwardVars, labels: &[usize]) -> Result<Vec<ClipTerms>> {
        let b = g.shape(fwd.logits)[0];
        if labels.len() != b {
            return Err(Error::Contract(format!("{} labels for a batch of {b}", labels.len())));
        }
        let mut out = Vec::with_capacity(b);
        for (i, &label) in labels.iter().enumerate() {
            let pick = |g: &mut Graph, v: Var| -> Result<Var> {
                let shape = g.shape(v)[1..].to_vec();
                let one = g.narrow(v, 0, i, 1)?;
                g.reshape(one, &shape)
            };
            out.push(ClipTerms {
                tokens: pick(g, fwd.tokens)?,
                cls: pick(g, fwd.cls)?,
                states: pick(g, fwd.states)?,
                logits: pick(g, fwd.logits)?,
                label,
            });
        }
        Ok(out)
    }

    /// Forward pass plus the full objective.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&FrameFeatures],
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(LossVars, ForwardVars)> {
        let fwd = self.forward(g, p, batch)?;
        let clips = self.clip_terms(g, &fwd, labels)?;
        let ctx = BatchContext {
            clips,
            cfg: cfg.clone(),
        };
        Ok((total_loss(g, &ctx)?, fwd))
    }

    /// Inference on a batch without gradients.
    pub fn analyze(&self, batch: &[&FrameFeatures]) -> Result<Vec<ClipAnalysis>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let fwd = self.forward(&mut g, &p, batch)?;
        let t = self.cfg.frames;
        let logits = g.value(fwd.logits);
        let attn = g.value(fwd.attn);
        let states = g.value(fwd.states);
        Ok((0..batch.len())
            .map(|i| {
                let frames: Vec<Tensor> = (0..t).map(|f| attn.index0(i * t + f)).collect();
                ClipAnalysis {
                    logits: logits.index0(i).into_data(),
                    attn: Tensor::stack(&frames).expect("equal frame shapes"),
                    states: StateChangeMatrix {
                        s: states.index0(i),
                        delta: self.cfg.delta,
                    },
                }
            })
            .collect())
    }
}
