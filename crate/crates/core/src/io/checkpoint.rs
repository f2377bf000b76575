use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{flatten, names, unflatten, ParamTree};
use crate::tensor::Tensor;

use super::{read_text, write_atomic};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors in parameter visit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: IndexMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn from_tree<X: ParamTree<Tensor<f64>>>(tree: &X, root: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            tensors: names(tree, root).into_iter().zip(flatten(tree)).collect(),
        }
    }

    /// Copies the stored tensors into `tree`, which must have exactly the
    /// same names and shapes.
    pub fn restore<X: ParamTree<Tensor<f64>>>(&self, tree: &mut X, root: &str) -> Result<()> {
        let expected = names(tree, root);
        let found: Vec<&String> = self.tensors.keys().collect();
        if expected.iter().ne(found.iter().copied()) {
            let missing: Vec<&String> = expected
                .iter()
                .filter(|n| !self.tensors.contains_key(*n))
                .collect();
            return Err(Error::Precondition(format!(
                "checkpoint layout differs from model; missing {missing:?}"
            )));
        }
        let values: Vec<Tensor<f64>> = self.tensors.values().cloned().collect();
        unflatten(tree, &values)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let fail = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let ck: Checkpoint =
        serde_json::from_str(&read_text(path)?).map_err(|e| fail(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint version {}",
            ck.version
        )));
    }
    for (name, t) in &ck.tensors {
        if t.shape().iter().product::<usize>() != t.len() {
            return Err(fail(format!("tensor {name} has inconsistent shape")));
        }
    }
    Ok(ck)
}
