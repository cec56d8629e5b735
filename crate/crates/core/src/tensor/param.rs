use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// A trainable tensor with a gradient slot of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform samples in `±sqrt(6 / fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk parameter list: `{"parameters": [{"name", "shape", "values"}]}`
/// with values in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub parameters: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_params(params: &[Parameter]) -> Self {
        Self {
            parameters: params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Copies values into `params`, matching by name. Both sides must hold
    /// the same names with identical shapes.
    pub fn restore_into(&self, params: &mut [Parameter]) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.parameters {
            if !seen.insert(entry.name.as_str()) {
                return Err(TensorError::Usage(format!("duplicate parameter `{}`", entry.name)));
            }
            if !params.iter().any(|p| p.name == entry.name) {
                return Err(TensorError::Usage(format!("unexpected parameter `{}`", entry.name)));
            }
        }
        for p in params.iter_mut() {
            let entry = self
                .parameters
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| TensorError::Usage(format!("checkpoint lacks `{}`", p.name)))?;
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())?;
            p.value.check_same_shape(&t, "restore")?;
            p.value = t;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| TensorError::Usage(format!("bad checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
