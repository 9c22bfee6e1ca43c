//! JSON model checkpoints: the training config, the attribute grouping and
//! every named parameter array with its shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GroupingScheme;
use crate::error::{io_err, Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::train::{Model, TrainConfig};

pub const FORMAT: &str = "cas-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub grouping: GroupingScheme,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(config: &TrainConfig, grouping: &GroupingScheme, model: &Model) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            grouping: grouping.clone(),
            params: model
                .store()
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.value.shape().0,
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model from the stored config and fills in every
    /// parameter. Missing, unexpected or mis-shaped arrays are errors.
    pub fn into_model(self) -> Result<(TrainConfig, GroupingScheme, Model)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut model = Model::build(&self.config, self.grouping.group_a.len(), self.grouping.group_b.len())?;
        let store = model.store_mut();
        let mut filled = vec![false; store.len()];
        for arr in self.params {
            let id = store
                .find(&arr.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", arr.name)))?;
            let expected = store.value(id).shape();
            if Shape(arr.shape) != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: stored shape {:?} != model shape {expected:?}",
                    arr.name,
                    Shape(arr.shape)
                )));
            }
            if filled[id.index()] {
                return Err(Error::Checkpoint(format!("parameter {} stored twice", arr.name)));
            }
            *store.value_mut(id) = Tensor::from_vec(expected, arr.data)
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", arr.name)))?;
            filled[id.index()] = true;
        }
        if let Some(missing) = store.ids().find(|id| !filled[id.index()]) {
            return Err(Error::Checkpoint(format!("missing parameter {}", store.name(missing))));
        }
        Ok((self.config, self.grouping, model))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
