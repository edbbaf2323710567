//! Named parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a dotted path such as
//! `mr.block1.conv.weight`. Modules never own parameters: they borrow tensors
//! from a [`Scope`] at build time. A scope marked frozen hands out detached
//! views, so frozen weights never enter the autograd graph while still sharing
//! storage with the store (optimizer updates stay visible).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    /// Identity for a `[C, C, 1, 1]` kernel or `[C, C]` matrix.
    Identity,
    Normal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self, trainable: bool) -> Scope {
        Scope { store: self.clone(), prefix: String::new(), trainable }
    }

    fn init_values(&self, path: &str, numel: usize, dims: &[usize], init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Identity => {
                let c = dims[0];
                let mut v = vec![0.0; numel];
                let per = numel / (c * dims.get(1).copied().unwrap_or(c));
                for i in 0..c.min(dims.get(1).copied().unwrap_or(c)) {
                    v[(i * dims[1] + i) * per] = 1.0;
                }
                v
            }
            Init::Uniform { fan_in } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(path));
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(path));
                (0..numel)
                    .map(|_| {
                        // Box-Muller
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen();
                        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            }
        }
    }

    /// Fetch a parameter, creating it with `init` when absent.
    pub fn get_or_init(&self, path: &str, dims: &[usize], init: Init) -> Result<Var> {
        let mut map = self.inner.lock().expect("param store poisoned");
        if let Some(v) = map.get(path) {
            if v.dims() != dims {
                return Err(shape_err!("parameter {path}: stored shape {:?}, requested {dims:?}", v.dims()));
            }
            return Ok(v.clone());
        }
        let numel: usize = dims.iter().product();
        let values = self.init_values(path, numel, dims, init);
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        map.insert(path.to_string(), var.clone());
        Ok(var)
    }

    /// Insert or overwrite a parameter with explicit values.
    pub fn insert(&self, path: &str, tensor: &Tensor) -> Result<()> {
        let t = tensor.to_dtype(self.dtype)?;
        let mut map = self.inner.lock().expect("param store poisoned");
        match map.get(path) {
            Some(v) if v.dims() == t.dims() => v.set(&t)?,
            _ => {
                map.insert(path.to_string(), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").get(path).cloned()
    }

    /// All parameters in lexicographic path order.
    pub fn entries(&self) -> Vec<(String, Var)> {
        let map = self.inner.lock().expect("param store poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Parameters whose path starts with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v)
            .collect()
    }

    /// Deep copy of every parameter value, keyed by path.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.entries() {
            out.insert(k, crate::nn::ops::to_f64_vec(v.as_tensor())?);
        }
        Ok(out)
    }

    /// Independent copy with the same values, dtype converted.
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let out = ParamStore::new(dtype, self.seed);
        for (k, v) in self.entries() {
            out.insert(&k, &v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A path prefix into a store plus the trainability of everything under it.
#[derive(Debug, Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
    trainable: bool,
}

impl Scope {
    pub fn sub(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Scope { store: self.store.clone(), prefix, trainable: self.trainable }
    }

    pub fn with_trainable(&self, trainable: bool) -> Scope {
        Scope { trainable, ..self.clone() }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn tensor(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let var = self.store.get_or_init(&self.path(name), dims, init)?;
        Ok(if self.trainable { var.as_tensor().clone() } else { var.as_detached_tensor() })
    }
}
