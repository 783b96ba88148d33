//! JSON checkpoints: configuration echo, named parameters, optimizer state
//! and the inference-time tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causal::{ClassPriorTable, CounterfactualVocab};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::model::{CiderModel, Dims};
use crate::params::Adam;
use crate::training::TrainState;

const FORMAT: &str = "cider-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub dims: Dims,
    pub epoch: usize,
    pub best_valid: Option<f64>,
    pub bad_epochs: usize,
    pub params: BTreeMap<String, Mat>,
    pub optimizer: Adam,
    pub class_table: Option<ClassPriorTable>,
    pub cf_vocab: Option<CounterfactualVocab>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, cf_vocab: Option<CounterfactualVocab>) -> Self {
        Self {
            format: FORMAT.to_string(),
            config: state.model.cfg.clone(),
            dims: state.model.dims,
            epoch: state.epoch,
            best_valid: state.best_valid,
            bad_epochs: state.bad_epochs,
            params: state.model.store.to_named(),
            optimizer: state.opt.clone(),
            class_table: state.table.clone(),
            cf_vocab,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Self = serde_json::from_reader(f)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        Ok(ck)
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<CiderModel> {
        let mut model = CiderModel::new(self.config.clone(), self.dims)?;
        model.store.load_named(&self.params)?;
        Ok(model)
    }

    pub fn into_state(self) -> Result<(TrainState, Option<CounterfactualVocab>)> {
        let model = self.model()?;
        let state = TrainState {
            model,
            opt: self.optimizer,
            epoch: self.epoch,
            best_valid: self.best_valid,
            bad_epochs: self.bad_epochs,
            table: self.class_table,
        };
        Ok((state, self.cf_vocab))
    }
}
