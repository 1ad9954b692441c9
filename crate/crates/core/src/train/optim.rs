use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};

/// SGD with momentum and L2 weight decay, in the formulation
/// `v = μ·v + (g + λ·w)`, `w = w − lr·v`, with `v` starting at the first
/// gradient. Decay is applied to `Weight` parameters only; batch-norm
/// scales and shifts are not decayed.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, param) in params.trainable() {
            let Some(grad) = grads.get(param.var.as_tensor()) else {
                continue;
            };
            let mut d = grad.clone();
            if param.kind == ParamKind::Weight && self.weight_decay > 0.0 {
                d = (d + (param.var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(&name) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + d)?,
                _ => d,
            };
            param.var.set(&(param.var.as_tensor() - (&v * lr)?)?)?;
            if self.momentum > 0.0 {
                self.velocity.insert(name, v.detach());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.velocity.clone().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, params: &ParamStore) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, params.device()).map_err(|e| Error::WeightLoad {
            tensor: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut velocity = BTreeMap::new();
        for (name, v) in loaded {
            let param = params.get(&name).ok_or_else(|| Error::WeightLoad {
                tensor: name.clone(),
                reason: "optimizer state for unknown parameter".into(),
            })?;
            if param.var.dims() != v.dims() {
                return Err(Error::WeightLoad {
                    tensor: name,
                    reason: format!("momentum shape {:?}, expected {:?}", v.dims(), param.var.dims()),
                });
            }
            velocity.insert(name, v);
        }
        self.velocity = velocity;
        Ok(())
    }
}
