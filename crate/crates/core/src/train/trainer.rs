use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{load_split, Sample};
use super::eval::{evaluate, EvalReport};
use super::optim::{adamw_step, clip_grad_norm, AdamHyper, AdamState};
use super::sampler::LabelAwareSampler;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossValues;
use crate::model::Model;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: AdamState,
    pub step: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    sampler: LabelAwareSampler,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        if model.cfg != cfg.model {
            return Err(Error::config("model was built from a different configuration"));
        }
        let sampler = LabelAwareSampler::new(train.iter().map(|s| s.label).collect(), cfg.batch_size, cfg.seed)?;
        let state = AdamState::new(model.store.tensors());
        Ok(Self {
            cfg,
            model,
            state,
            step: 0,
            train,
            val,
            sampler,
        })
    }

    /// Builds the model and loads both splits from the configured manifest.
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let train = load_split(&cfg.data, Split::Train, &model)?;
        let val = load_split(&cfg.data, Split::Val, &model)?;
        Self::new(cfg, model, train, val)
    }

    /// Continues from a checkpoint with the given data.
    pub fn resume(ckpt: &Checkpoint, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        let model = ckpt.model()?;
        let mut t = Self::new(ckpt.config.clone(), model, train, val)?;
        t.state = ckpt.state.clone();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            names: self.model.store.names().to_vec(),
            params: self.model.store.tensors().to_vec(),
            state: self.state.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.sampler.batches_per_epoch() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Forward, backward and one optimizer update on the batch of the
    /// current step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let idx = self.sampler.batch_at(self.step);
        let feats: Vec<_> = idx.iter().map(|&i| &self.train[i].features).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.train[i].label).collect();
        let batch_ids = || idx.iter().map(|&i| self.train[i].id.as_str()).collect::<Vec<_>>().join(",");

        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let (loss, _) = self.model.loss(&mut g, &p, &feats, &labels, &self.cfg.loss)?;
        let losses = loss.values(&g);
        if ![losses.obj, losses.temp, losses.cls, losses.total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                batch: batch_ids(),
                detail: serde_json::to_string(&losses)?,
            });
        }
        g.backward(loss.total)?;
        let mut grads = p.grads(&g);
        if !grads.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                batch: batch_ids(),
                detail: "non-finite gradient".into(),
            });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.cfg.lr_at(self.step, self.total_steps());
        let hp = self.hyper();
        adamw_step(self.model.store.tensors_mut(), &grads, &mut self.state, lr, &hp)?;
        let log = StepLog {
            step: self.step,
            losses,
        };
        self.step += 1;
        Ok(log)
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalReport> {
        let samples = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        evaluate(&self.model, samples, self.cfg.baseline_samples, self.cfg.seed)
    }

    /// Trains until the configured number of epochs is done, writing one
    /// JSON line per step to `log` and periodic validation records to
    /// `eval_log`. A non-finite loss stops the run and leaves a dump of the
    /// offending batch in the run directory.
    pub fn run(&mut self, log: &mut dyn Write, mut eval_log: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
        let total = self.total_steps();
        let per_epoch = self.steps_per_epoch();
        let mut history = Vec::with_capacity((total - self.step.min(total)) as usize);
        while self.step < total {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    self.dump_failure(&e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            history.push(rec);
            let epoch = self.step / per_epoch;
            let every = self.cfg.eval_every as u64;
            if let Some(sink) = eval_log.as_deref_mut() {
                if every > 0 && self.step % per_epoch == 0 && epoch % every == 0 && !self.val.is_empty() {
                    let report = self.evaluate(Split::Val)?;
                    log::info!("epoch {epoch}: val accuracy {:.3}", report.accuracy);
                    let rec = EvalLog {
                        step: self.step,
                        epoch,
                        report,
                    };
                    writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
                }
            }
        }
        log.flush()?;
        Ok(history)
    }

    fn dump_failure(&self, err: &Error) {
        let dir: &Path = &self.cfg.out;
        let body = serde_json::json!({ "error": err.to_string(), "step": self.step });
        let result = fs::create_dir_all(dir)
            .and_then(|_| fs::write(dir.join("nonfinite_dump.json"), body.to_string()));
        if let Err(e) = result {
            log::error!("could not write failure dump: {e}");
        }
    }
}
