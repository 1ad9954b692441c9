use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Bias-free linear identity classifier: `logits = W · f`, `W` is `[C, d]`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    weight: Var,
}

impl ClassifierHead {
    pub fn new(weight: Var) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "classifier weight must be [C, d], got {:?}",
                weight.dims()
            )));
        }
        Ok(ClassifierHead { weight })
    }

    pub fn from_tensor(weight: &Tensor) -> Result<Self> {
        Self::new(Var::from_tensor(weight)?)
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.weight
    }

    pub fn num_classes(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Logits of a single feature `[d]` (giving `[C]`) or a batch `[N, d]`
/// (giving `[N, C]`).
pub fn classifier_logits(head: &ClassifierHead, features: &Tensor) -> Result<Tensor> {
    let d = *features.dims().last().unwrap_or(&0);
    if d != head.dim() || features.rank() == 0 || features.rank() > 2 {
        return Err(Error::Shape(format!(
            "feature {:?} does not match classifier of dim {}",
            features.dims(),
            head.dim()
        )));
    }
    let w = head.weight().to_dtype(features.dtype())?;
    if features.rank() == 1 {
        Ok(features.unsqueeze(0)?.matmul(&w.t()?)?.squeeze(0)?)
    } else {
        Ok(features.matmul(&w.t()?)?)
    }
}
