use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{Graph, NodeId, ParamId, Scalar, Tensor};
use crate::error::Error;

/// Which half of a network a trainable tensor belongs to. Drives per-group
/// learning rates and freezing during partial fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Feature,
    Matching,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Feature => "feature",
            ParamGroup::Matching => "matching",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "feature" => Ok(ParamGroup::Feature),
            "matching" => Ok(ParamGroup::Matching),
            other => Err(Error::Config(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Randomly initialized (not carried over from backbone pretraining).
    pub fresh: bool,
}

/// Ordered collection of named, group-tagged trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    info: Vec<ParamInfo>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: Vec::new(),
            info: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, info: ParamInfo, value: Tensor<T>) -> ParamId {
        self.tensors.push(value);
        self.info.push(info);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.info[id.0]
    }

    pub fn info_mut(&mut self, id: ParamId) -> &mut ParamInfo {
        &mut self.info[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.info
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.ids()
            .filter(|&id| self.info(id).group == group)
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Bind `id` into `g`: as a trainable leaf, or as a constant when frozen.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId, trainable: bool) -> NodeId {
        if trainable {
            g.param(id, self.get(id))
        } else {
            g.input(self.get(id).clone())
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            info: self.info.clone(),
        }
    }

    /// SHA-256 over the serialized tensors of one group, hex encoded.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for id in self.ids().filter(|&id| self.info(id).group == group) {
            hasher.update(self.info(id).name.as_bytes());
            hasher.update(self.get(id).to_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
