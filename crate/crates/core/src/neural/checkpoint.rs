//! Model checkpoints as a single JSON document with named tensors.
//!
//! Floats are written through the fixed-width formatter so saving and
//! reloading reproduces every weight bit for bit, and rewriting an
//! unchanged checkpoint yields an identical file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NeuralError;
use crate::jsonl;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Which model family wrote this file, e.g. "fusion" or "bilstm".
    pub kind: String,
    /// Model-specific scalars: normalisation statistics, shapes, training
    /// progress. Kept schemaless so each model owns its own layout.
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NeuralError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
            .ok_or_else(|| NeuralError::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        jsonl::write_json_file(path, self).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let ck: Checkpoint =
            jsonl::read_json_file(path).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Checks that the file on disk declares the expected model family.
    pub fn expect_kind(&self, kind: &str) -> Result<(), NeuralError> {
        if self.kind != kind {
            return Err(NeuralError::Checkpoint(format!(
                "checkpoint holds a '{}' model, expected '{kind}'",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sub_rng;

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");

        let mut rng = sub_rng(5, "test/ckpt");
        let mut ck = Checkpoint::new(
            "fusion",
            serde_json::json!({"hidden": 24, "note": "round trip", "scale": 0.1 + 0.2}),
        );
        ck.push("w", Tensor::uniform(4, 6, 1.0, &mut rng));
        ck.push("b", Tensor::from_vec(1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]));
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "fusion");
        for (a, b) in ck.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // rewriting the reloaded checkpoint reproduces the bytes
        let path2 = dir.join("model2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_tensor_and_wrong_kind_are_reported() {
        let ck = Checkpoint::new("bilstm", serde_json::Value::Null);
        assert!(matches!(ck.get("absent"), Err(NeuralError::Checkpoint(_))));
        assert!(ck.expect_kind("fusion").is_err());
        assert!(ck.expect_kind("bilstm").is_ok());
    }

    #[test]
    fn version_gate_rejects_future_files() {
        let dir = std::env::temp_dir().join(format!("ckpt-ver-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("future.json");
        let mut ck = Checkpoint::new("fusion", serde_json::Value::Null);
        ck.format_version = 99;
        jsonl::write_json_file(&path, &ck).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NeuralError::Checkpoint(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
