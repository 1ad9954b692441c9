use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How the optimizer treats a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable and weight-decayed (convolutions, classifiers).
    Weight,
    /// Learnable, no weight decay (batch-norm scale and shift).
    Norm,
    /// Not learnable (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named tensors of a model, ordered by name.
///
/// Initial values are drawn from a generator seeded by the store seed and
/// the parameter's *logical* name, so two parameters with the same logical
/// name (a layer replicated into several branches) start out identical,
/// and the result never depends on construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Arc<RwLock<BTreeMap<String, Param>>>,
    device: Device,
    seed: u64,
}

pub(crate) enum Init {
    /// He-normal over the fan-in of a `[C_out, C_in, k, k]` or `[C_out, C_in]` weight.
    KaimingFanIn,
    Normal(f64),
    Const(f64),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(device: Device, seed: u64) -> Self {
        ParamStore {
            params: Arc::new(RwLock::new(BTreeMap::new())),
            device,
            seed,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn initial_value(&self, logical: &str, shape: &[usize], init: &Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match *init {
            Init::Const(v) => vec![v as f32; n],
            Init::Normal(std) => self.normal(logical, n, std),
            Init::KaimingFanIn => {
                let fan_in: usize = shape[1..].iter().product();
                self.normal(logical, n, (2.0 / fan_in.max(1) as f64).sqrt())
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?)
    }

    fn normal(&self, logical: &str, n: usize, std: f64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(logical.as_bytes()));
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
    }

    /// Registers `name`, initialized from `logical`'s generator.
    pub(crate) fn create(
        &self,
        name: &str,
        logical: &str,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
    ) -> Result<Var> {
        let value = self.initial_value(logical, shape, &init)?;
        let var = Var::from_tensor(&value)?;
        let mut params = self.params.write().expect("param lock");
        if params.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.params.read().expect("param lock").get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.read().expect("param lock").keys().cloned().collect()
    }

    /// All parameters in name order.
    pub fn all(&self) -> Vec<(String, Param)> {
        self.params
            .read()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Param)> {
        self.all()
            .into_iter()
            .filter(|(_, p)| p.kind != ParamKind::Buffer)
            .collect()
    }

    pub fn num_learnable(&self) -> usize {
        self.trainable().iter().map(|(_, p)| p.var.elem_count()).sum()
    }

    /// Overwrites a parameter, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let param = self.get(name).ok_or_else(|| Error::WeightLoad {
            tensor: name.to_string(),
            reason: "no such parameter".into(),
        })?;
        if param.var.dims() != value.dims() {
            return Err(Error::WeightLoad {
                tensor: name.to_string(),
                reason: format!("shape {:?}, expected {:?}", value.dims(), param.var.dims()),
            });
        }
        param
            .var
            .set(&value.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Sets every tensor to zero.
    pub fn zero_all(&self) -> Result<()> {
        for (_, p) in self.all() {
            p.var.set(&p.var.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.all()
            .into_iter()
            .map(|(k, p)| (k, p.var.as_tensor().detach()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }

    /// Loads every parameter of this store from a safetensors file. Extra
    /// tensors in the file are ignored; missing ones are an error.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device).map_err(|e| Error::WeightLoad {
            tensor: path.display().to_string(),
            reason: e.to_string(),
        })?;
        for name in self.names() {
            let value = tensors.get(&name).ok_or_else(|| Error::WeightLoad {
                tensor: name.clone(),
                reason: format!("missing from {}", path.display()),
            })?;
            self.assign(&name, value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_logical_name_same_values() {
        let store = ParamStore::new(Device::Cpu, 7);
        let a = store
            .create("a.w", "layer.w", &[4, 3, 3, 3], ParamKind::Weight, Init::KaimingFanIn)
            .unwrap();
        let b = store
            .create("b.w", "layer.w", &[4, 3, 3, 3], ParamKind::Weight, Init::KaimingFanIn)
            .unwrap();
        let c = store
            .create("c.w", "other.w", &[4, 3, 3, 3], ParamKind::Weight, Init::KaimingFanIn)
            .unwrap();
        let flat = |v: &Var| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        // independent storage
        b.set(&b.zeros_like().unwrap()).unwrap();
        assert_ne!(flat(&a), flat(&b));
    }

    #[test]
    fn assign_checks_shape_and_names_tensor() {
        let store = ParamStore::new(Device::Cpu, 0);
        store
            .create("head.w", "head.w", &[2, 3], ParamKind::Weight, Init::Const(0.0))
            .unwrap();
        let err = store
            .assign("head.w", &Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("head.w"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = ParamStore::new(Device::Cpu, 1);
        a.create("x", "x", &[5], ParamKind::Weight, Init::Normal(1.0)).unwrap();
        a.save(&path).unwrap();
        let b = ParamStore::new(Device::Cpu, 2);
        b.create("x", "x", &[5], ParamKind::Weight, Init::Normal(1.0)).unwrap();
        b.load(&path).unwrap();
        let get = |s: &ParamStore| s.get("x").unwrap().var.as_tensor().to_vec1::<f32>().unwrap();
        assert_eq!(get(&a), get(&b));
    }
}
