//! Named parameter collections, tape binding, and checkpoints.
//!
//! A checkpoint is a JSON object `{"format": "priormap-params/1", "params":
//! {name: {"shape": [...], "data": [...]}}}` with parameters in insertion
//! order. Values round-trip bit-exactly.

use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "priormap-params/1";

/// Standard deviation of Gaussian weight initialization.
pub const INIT_SD: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    params: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::contract("ParamSet::insert", format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::contract("ParamSet::get", format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract("ParamSet::get_mut", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect() }
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), params: self.tensors.clone() };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", &e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        for (name, t) in &ck.params {
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|e| Error::Config(format!("parameter {name}: {e}")))?;
        }
        Ok(Self { tensors: ck.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::contract("Bound::get", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients in parameter order, zeros where none flowed.
    pub fn gradients(&self, grads: &GradMap) -> Vec<(String, Tensor)> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.get(v))).collect()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Gaussian tensor with mean 0 and standard deviation `sd`.
pub fn normal(shape: &[usize], sd: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, sd).expect("finite standard deviation");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
