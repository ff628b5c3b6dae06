//! Named parameter collections and the JSON checkpoint format.
//!
//! A checkpoint is a single JSON document mapping parameter names to
//! `{shape, data}`. Loading validates the stored set against the model's
//! expected parameters: unknown names, missing names, and shape mismatches
//! are all rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint contains unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}': expected shape {expected:?}, checkpoint has {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter '{name}': shape {shape:?} does not match {len} data values")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Ordered collection of named tensors; the order fixes optimizer-state
/// alignment and the order in which parameters enter a graph.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name '{name}'"
        );
        self.entries.push((name.to_string(), tensor.with_grad()));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Inserts every parameter into `graph` as a gradient-tracked leaf,
    /// returning ids aligned with the set's order.
    pub fn insert_into(&self, graph: &mut Graph) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|(_, t)| graph.param(t.clone()))
            .collect()
    }

    /// Copies gradients back from graph leaves created by [`insert_into`],
    /// accumulating into each parameter's grad buffer.
    pub fn harvest_grads(&mut self, graph: &Graph, ids: &[TensorId]) {
        assert_eq!(ids.len(), self.entries.len());
        for ((_, tensor), &id) in self.entries.iter_mut().zip(ids) {
            if let Some(g) = graph.grad(id) {
                tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, CheckpointEntry> = self
            .entries
            .iter()
            .map(|(n, t)| {
                (
                    n.as_str(),
                    CheckpointEntry { shape: t.shape.clone(), data: t.data.clone() },
                )
            })
            .collect();
        serde_json::to_string(&map).expect("checkpoint serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Parses a checkpoint and validates it against the expected
    /// `(name, shape)` set; entries come back in `expected` order.
    pub fn from_json(
        json: &str,
        expected: &[(String, Vec<usize>)],
    ) -> Result<Self, CheckpointError> {
        let mut stored: BTreeMap<String, CheckpointEntry> = serde_json::from_str(json)?;
        for name in stored.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(CheckpointError::UnknownParam(name.clone()));
            }
        }
        let mut set = ParamSet::new();
        for (name, shape) in expected {
            let entry = stored
                .remove(name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if &entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: entry.shape,
                });
            }
            let numel: usize = entry.shape.iter().product();
            if numel != entry.data.len() {
                return Err(CheckpointError::LengthMismatch {
                    name: name.clone(),
                    shape: entry.shape,
                    len: entry.data.len(),
                });
            }
            let tensor = Tensor {
                shape: entry.shape,
                data: entry.data,
                requires_grad: true,
                grad: None,
            };
            set.entries.push((name.clone(), tensor));
        }
        Ok(set)
    }

    pub fn load(
        path: &Path,
        expected: &[(String, Vec<usize>)],
    ) -> Result<Self, CheckpointError> {
        let json = fs::read_to_string(path)?;
        Self::from_json(&json, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        set.insert("b", Tensor::from_vec(vec![0.5, -0.5]));
        set
    }

    fn expected() -> Vec<(String, Vec<usize>)> {
        vec![("w".into(), vec![2, 2]), ("b".into(), vec![2])]
    }

    #[test]
    fn checkpoint_round_trip() {
        let set = sample_set();
        let json = set.to_json();
        let loaded = ParamSet::from_json(&json, &expected()).unwrap();
        assert_eq!(loaded.get("w").unwrap().data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(loaded.get("b").unwrap().data, vec![0.5, -0.5]);
    }

    #[test]
    fn checkpoint_json_is_deterministic() {
        let set = sample_set();
        assert_eq!(set.to_json(), sample_set().to_json());
    }

    #[test]
    fn load_rejects_unknown_name() {
        let json = sample_set().to_json();
        let only_w = vec![("w".to_string(), vec![2, 2])];
        assert!(matches!(
            ParamSet::from_json(&json, &only_w),
            Err(CheckpointError::UnknownParam(n)) if n == "b"
        ));
    }

    #[test]
    fn load_rejects_missing_name() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::zeros(vec![2, 2]));
        let json = set.to_json();
        assert!(matches!(
            ParamSet::from_json(&json, &expected()),
            Err(CheckpointError::MissingParam(n)) if n == "b"
        ));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let json = sample_set().to_json();
        let wrong = vec![("w".to_string(), vec![4]), ("b".to_string(), vec![2])];
        assert!(matches!(
            ParamSet::from_json(&json, &wrong),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn harvest_accumulates_graph_grads() {
        let mut set = sample_set();
        let mut g = Graph::new();
        let ids = set.insert_into(&mut g);
        let s0 = g.sum(ids[0]);
        let s1 = g.sum(ids[1]);
        let total = g.add(s0, s1).unwrap();
        g.backward(total).unwrap();
        set.harvest_grads(&g, &ids);
        assert_eq!(set.get("w").unwrap().grad.as_deref(), Some(&[1.0; 4][..]));
        assert_eq!(set.get("b").unwrap().grad.as_deref(), Some(&[1.0; 2][..]));
    }
}
