//! AdamW with decoupled weight decay and serializable state.
//!
//! Moments are plain tensors keyed by parameter name, so optimizer state
//! survives checkpointing and a resumed run continues bit-for-bit (modulo
//! float non-associativity, which does not arise: updates replay the same
//! op order).

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("optimizer needs at least one parameter"));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            let zeros = var.as_detached_tensor().zeros_like()?;
            m.insert(name.clone(), zeros.clone());
            v.insert(name.clone(), zeros);
        }
        Ok(Self {
            cfg,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Applies one update. Parameters without a gradient in `grads` are
    /// left untouched (their moments do not advance either).
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = grad.detach();
            let m = self.m.get(name).expect("moment created in new");
            let v = self.v.get(name).expect("moment created in new");
            let m_next = ((m * self.cfg.beta1)? + (&grad * (1.0 - self.cfg.beta1))?)?;
            let v_next = ((v * self.cfg.beta2)? + (grad.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&m_next * (1.0 / bc1))?;
            let v_hat = (&v_next * (1.0 / bc2))?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let theta = var.as_detached_tensor();
            let decayed = (&update + (&theta * self.cfg.weight_decay)?)?;
            let theta_next = (theta - (decayed * self.cfg.lr)?)?;
            var.set(&theta_next)?;
            self.m.insert(name.clone(), m_next);
            self.v.insert(name.clone(), v_next);
        }
        Ok(())
    }

    /// Serializes moments as `m.<name>` / `v.<name>`. The step counter is
    /// the caller's to record (it lives in checkpoint metadata).
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut map = std::collections::HashMap::new();
        for (name, t) in &self.m {
            map.insert(format!("m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            map.insert(format!("v.{name}"), t.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load_state(&mut self, path: &Path, step: u64) -> Result<()> {
        let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)?;
        for (name, _) in &self.params {
            let m = map
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing m.{name}")))?;
            let v = map
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing v.{name}")))?;
            let expect = self.m.get(name).expect("moment exists").dims();
            if m.dims() != expect || v.dims() != expect {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has wrong shape"
                )));
            }
            self.m.insert(name.clone(), m.clone());
            self.v.insert(name.clone(), v.clone());
        }
        self.step = step;
        Ok(())
    }
}
