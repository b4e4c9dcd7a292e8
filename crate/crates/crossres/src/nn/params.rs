//! Named parameter store with seeded initialization.
//!
//! Initial values are drawn from a per-parameter stream derived from the
//! store seed and the parameter name, so values do not depend on creation
//! order and adding a parameter never shifts another one's init.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Zero-mean Gaussian with the given std-dev.
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Gaussian with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Uniform on `[-l, l]` with `l = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Owns every model parameter as a named [`Var`].
pub struct ParamStore {
    device: Device,
    seed: u64,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            seed,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    fn fresh_values(&self, name: &str, n: usize, init: Init) -> Vec<f32> {
        let mut rng = self.rng_for(name);
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi) as f32).collect(),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let l = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-l..l) as f32).collect()
            }
        }
    }

    /// Fetches the named parameter, creating it with `init` on first use.
    /// The returned tensor shares identity with the stored [`Var`], so
    /// gradients computed through it reach the optimizer.
    pub fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::invalid(format!(
                    "parameter {name} exists with shape {:?}, requested {:?}",
                    var.dims(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values = self.fresh_values(name, n, init);
        let t = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Like [`ParamStore::take`] but the parameter never reaches the
    /// optimizer (running statistics, fixed embeddings).
    pub fn take_frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.take(name, shape, init)?;
        self.frozen.insert(name.to_string());
        Ok(t)
    }

    /// Marks every parameter whose name starts with `prefix` as untrainable.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .vars
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Writes new values into an existing parameter.
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        var.set(value)?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_detached_tensor()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads values into the store. Existing parameters are overwritten in
    /// place (shapes must match); unknown names are inserted so that layers
    /// built afterwards pick the loaded values up.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        for (name, tensor) in map {
            let tensor = tensor.to_dtype(DType::F32)?;
            match self.vars.get(&name) {
                Some(var) => var.set(&tensor)?,
                None => {
                    self.vars.insert(name, Var::from_tensor(&tensor)?);
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over (name, shape, little-endian f32 bytes) in name order.
    /// Stable across processes; changes when any value changes.
    pub fn checksum(&self) -> Result<String> {
        self.checksum_prefix("")
    }

    /// [`ParamStore::checksum`] restricted to names starting with `prefix`,
    /// so one subnetwork (say, a frozen denoiser) can be fingerprinted
    /// inside a store that also holds trainable parameters.
    pub fn checksum_prefix(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f32> = var.as_detached_tensor().flatten_all()?.to_vec1()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
