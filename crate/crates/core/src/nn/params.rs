use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::device;
use crate::error::{Error, Result};

/// Initialization rule for a fresh parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain * sqrt(1 / fan_in)`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
}

impl Init {
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Normal {
            fan_in,
            gain: 2f64.sqrt(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Named, seeded parameters of one network family.
///
/// Each parameter is initialized from its own RNG stream derived from the
/// store seed and the parameter name, so construction order does not matter.
/// A frozen store hands out detached tensors: gradients never reach it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            seed,
            frozen: false,
        }
    }

    /// Store pre-filled from named tensors, e.g. a checkpoint.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            vars,
            dtype,
            seed: 0,
            frozen: false,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Returns the parameter `name`, creating it with `init` when absent.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, network expects {:?}",
                    v.dims(),
                    shape
                )));
            }
        } else {
            if self.frozen {
                return Err(Error::Shape(format!(
                    "frozen store has no parameter `{name}`"
                )));
            }
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Normal { fan_in, gain } => {
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape, &device())?.to_dtype(self.dtype)?;
            self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        }
        let v = &self.vars[name];
        Ok(if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        })
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// View whose tensors share storage with `self` but never take gradients.
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// Deep copy with independent storage, optionally converted.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(
                k.clone(),
                Var::from_tensor(&v.as_tensor().to_dtype(dtype)?.copy()?)?,
            );
        }
        Ok(Self {
            vars,
            dtype,
            seed: self.seed,
            frozen: false,
        })
    }

    /// Overwrites every parameter with the values of `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.vars {
            let src = other
                .vars
                .get(k)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{k}`")))?;
            v.set(&src.as_tensor().to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }

    /// Order-sensitive FNV digest over every parameter's bit pattern.
    pub fn checksum(&self) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, v) in &self.vars {
            h ^= fnv1a(k);
            for x in v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
            {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Ok(h)
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}
