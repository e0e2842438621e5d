//! Finite-difference checks of every trainable block and every loss on small
//! random instances (T = 2, N = 2, D = 8).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::TemporalFusion;
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::graph::{Graph, Var};
use crate::losses::{
    classification_loss, object_distillation_loss, temporal_reasoning_loss, total_loss, BatchContext, ClipTerms,
    LossConfig,
};
use crate::object_time::{DeltaMode, InteractionConfig, ObjectTime};
use crate::params::{Bound, ParamStore};
use crate::slot_attention::{SlotAttention, SlotConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

const T: usize = 2;
const N: usize = 2;
const D: usize = 8;
const HW: usize = 4;
const K: usize = 3;

pub const MODULES: [&str; 10] = [
    "temporal_fusion",
    "slot_attention",
    "gru",
    "object_interact",
    "state_change",
    "head",
    "loss_obj",
    "loss_temp",
    "loss_cls",
    "total_loss",
];

#[derive(Clone, Debug, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub inputs: usize,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rnd(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -scale, scale, &mut rng)
}

fn contract(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rnd(g.shape(y), seed, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Parameters of `store`, all perturbed away from exact zeros so that
/// zero-initialised blocks are exercised too.
fn randomized(store: &ParamStore, seed: u64) -> Vec<Tensor> {
    store
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let noise = rnd(t.shape(), seed + i as u64, 0.3);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

fn run<F>(module: &str, inputs: Vec<Tensor>, f: F) -> Result<ModuleCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, &inputs, STEP, TOL)?;
    Ok(ModuleCheck {
        module: module.to_string(),
        inputs: inputs.len(),
        scalars: inputs.iter().map(Tensor::numel).sum(),
        max_rel_err: report.worst(),
        passed: report.passed(),
    })
}

fn loss_batch(vars: &[Var], labels: &[usize]) -> BatchContext {
    let clips = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| ClipTerms {
            tokens: vars[4 * i],
            cls: vars[4 * i + 1],
            states: vars[4 * i + 2],
            logits: vars[4 * i + 3],
            label,
        })
        .collect();
    BatchContext {
        clips,
        cfg: LossConfig::default(),
    }
}

fn loss_inputs(labels: &[usize], seed: u64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0..labels.len() as u64 {
        out.push(rnd(&[T, N, D], seed + 10 * i, 1.0));
        out.push(rnd(&[T, D], seed + 10 * i + 1, 1.0));
        // small states so the margin hinges are active
        out.push(rnd(&[T - 1, N, D], seed + 10 * i + 2, 0.2));
        out.push(rnd(&[K], seed + 10 * i + 3, 1.0));
    }
    out
}

/// Runs the finite-difference check of one named block.
pub fn check_module(module: &str) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labels = [0, 0, 1];
    match module {
        "temporal_fusion" => {
            let mut store = ParamStore::new();
            let fusion = TemporalFusion::new(&mut store, "fusion", D);
            let mut inputs = randomized(&store, 1);
            inputs.push(rnd(&[T, HW, D], 2, 1.0));
            let np = store.len();
            run(module, inputs, |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let y = fusion.forward(g, &p, v[np])?;
                contract(g, y, 3)
            })
        }
        "slot_attention" => {
            let mut store = ParamStore::new();
            let cfg = SlotConfig {
                n_slots: N,
                dim: D,
                iterations: 2,
                ..SlotConfig::default()
            };
            let sa = SlotAttention::new(&mut store, "slots", cfg, &mut rng)?;
            let mut inputs = store.tensors().to_vec();
            inputs.push(rnd(&[T, HW, D], 4, 1.0));
            let np = store.len();
            run(module, inputs, |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let out = sa.decompose(g, &p, v[np])?;
                let a = contract(g, out.tokens, 5)?;
                let b = contract(g, out.attn, 6)?;
                g.add(a, b)
            })
        }
        "gru" => {
            let mut store = ParamStore::new();
            let gru = crate::layers::Gru::new(&mut store, "gru", D, &mut rng);
            let mut inputs = randomized(&store, 7);
            inputs.push(rnd(&[N, D], 8, 1.0));
            inputs.push(rnd(&[N, D], 9, 1.0));
            let np = store.len();
            run(module, inputs, |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let y = gru.forward(g, &p, v[np], v[np + 1])?;
                contract(g, y, 10)
            })
        }
        "object_interact" | "state_change" | "head" => {
            let mut store = ParamStore::new();
            let cfg = InteractionConfig {
                dim: D,
                heads: 2,
                n_classes: K,
                ..InteractionConfig::default()
            };
            let ot = ObjectTime::new(&mut store, "ot", cfg, &mut rng)?;
            let np = store.len();
            let mut inputs = randomized(&store, 11);
            match module {
                "object_interact" => {
                    inputs.push(rnd(&[T, N, D], 12, 1.0));
                    run(module, inputs, |g, v| {
                        let p = Bound::from_vars(v[..np].to_vec());
                        let y = ot.object_interact(g, &p, v[np])?;
                        contract(g, y, 13)
                    })
                }
                "state_change" => {
                    inputs.push(rnd(&[T, N, D], 14, 1.0));
                    run(module, inputs, |g, v| {
                        let p = Bound::from_vars(v[..np].to_vec());
                        let y = ot.state_changes(g, &p, v[np], DeltaMode::Fixed(1))?;
                        contract(g, y, 15)
                    })
                }
                _ => {
                    inputs.push(rnd(&[T - 1, N, D], 16, 1.0));
                    run(module, inputs, |g, v| {
                        let p = Bound::from_vars(v[..np].to_vec());
                        let video = ot.pool_video(g, v[np])?;
                        let y = ot.classify(g, &p, video)?;
                        contract(g, y, 17)
                    })
                }
            }
        }
        "loss_obj" => run(module, loss_inputs(&labels, 20), |g, v| {
            object_distillation_loss(g, &loss_batch(v, &labels))
        }),
        "loss_temp" => run(module, loss_inputs(&labels, 30), |g, v| {
            temporal_reasoning_loss(g, &loss_batch(v, &labels))
        }),
        "loss_cls" => run(module, loss_inputs(&labels, 40), |g, v| {
            classification_loss(g, &loss_batch(v, &labels))
        }),
        "total_loss" => run(module, loss_inputs(&labels[1..], 50), |g, v| {
            Ok(total_loss(g, &loss_batch(v, &labels[1..]))?.total)
        }),
        other => Err(Error::Config(format!(
            "unknown module '{other}'; expected one of {}",
            MODULES.join(", ")
        ))),
    }
}

/// Checks every block, or only `filter` when given.
pub fn check_all(filter: Option<&str>) -> Result<Vec<ModuleCheck>> {
    match filter {
        Some(m) => Ok(vec![check_module(m)?]),
        None => MODULES.iter().map(|m| check_module(m)).collect(),
    }
}
