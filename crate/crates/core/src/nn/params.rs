use std::collections::BTreeMap;

use candle_core::{Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::DTYPE;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Named, seeded collection of trainable variables.
///
/// Parameters are created in a deterministic order from a ChaCha stream, so
/// the same seed and the same module construction order give identical
/// weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut self.rng))
                .collect(),
            Init::Uniform(bound) => {
                use rand::Rng;
                (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// All variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Overwrite the value of an existing variable in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, checkpoint shape {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(DTYPE)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values of every parameter with the prefix.
    pub fn fingerprint(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Scoped view of a [`ParamStore`] that prefixes parameter names.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn get<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    /// Draws from the store's init stream, for non-trainable state such as
    /// power-iteration vectors.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| StandardNormal.sample(&mut self.store.rng))
            .collect()
    }
}
