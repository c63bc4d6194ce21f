use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named model parameters keyed by stable dotted paths such as
/// `lsl.encoder.0.attn.wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

/// On-disk form of one parameter: shape plus row-major `f64` values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn to_snapshot(&self) -> BTreeMap<String, ParamSnapshot> {
        self.params
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    ParamSnapshot {
                        shape: v.shape().to_vec(),
                        data: v.to_f64_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn from_snapshot(snapshot: BTreeMap<String, ParamSnapshot>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, s) in snapshot {
            let t = Tensor::from_f64(s.shape, &s.data)
                .map_err(|e| Error::Validation(format!("parameter `{name}`: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_snapshot()).map_err(|e| Error::json("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        Self::from_snapshot(snap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    /// Checks that `other` has the same parameter names and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &self.params {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        if other.len() != self.len() {
            let extra = other
                .names()
                .find(|n| !self.contains(n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::UnknownParam(extra));
        }
        Ok(())
    }
}
