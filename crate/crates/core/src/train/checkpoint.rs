//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/index.json        step, config, config hash, tensor file table
//! <dir>/param_NNN.stf     parameter tensors
//! <dir>/m_NNN.stf         first moments
//! <dir>/v_NNN.stf         second moments
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::stf;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    param: String,
    m: String,
    v: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    format: u32,
    step: u64,
    adam_step: u64,
    config_hash: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub state: AdamState,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.params.len());
        for (i, name) in self.names.iter().enumerate() {
            let e = TensorEntry {
                name: name.clone(),
                param: format!("param_{i:03}.stf"),
                m: format!("m_{i:03}.stf"),
                v: format!("v_{i:03}.stf"),
            };
            stf::save(dir.join(&e.param), &self.params[i])?;
            stf::save(dir.join(&e.m), &self.state.m[i])?;
            stf::save(dir.join(&e.v), &self.state.v[i])?;
            tensors.push(e);
        }
        let index = Index {
            format: FORMAT_VERSION,
            step: self.step,
            adam_step: self.state.step,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            tensors,
        };
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: Index = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
        if index.format != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint format {}", index.format)));
        }
        if index.config.hash() != index.config_hash {
            return Err(Error::format("checkpoint config does not match its recorded hash"));
        }
        let mut names = Vec::new();
        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for e in &index.tensors {
            names.push(e.name.clone());
            params.push(stf::load(dir.join(&e.param))?);
            m.push(stf::load(dir.join(&e.m))?);
            v.push(stf::load(dir.join(&e.v))?);
        }
        Ok(Self {
            config: index.config,
            step: index.step,
            names,
            params,
            state: AdamState {
                step: index.adam_step,
                m,
                v,
            },
        })
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        model.store.load_from(&self.names, self.params.clone())?;
        for (p, (m, v)) in self.params.iter().zip(self.state.m.iter().zip(&self.state.v)) {
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::format("optimizer moments do not match parameter shapes"));
            }
        }
        Ok(model)
    }
}
