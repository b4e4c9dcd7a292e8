//! Normalization layers assembled from differentiable primitives.
//!
//! The backend ships fused layer-norm and softmax kernels without backward
//! passes; everything here sticks to ops the autodiff graph covers (sums,
//! broadcasts, sqrt), trading a little speed for gradients that exist.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamStore};

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
    dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.take(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: store.take(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.dim {
            return Err(Error::shape(format!(
                "layer norm over {} features, input has {}",
                self.dim,
                x.dim(D::Minus1)?
            )));
        }
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Group normalization over channel groups of an NCHW tensor.
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{channels} channels cannot form {groups} groups"
            )));
        }
        Ok(Self {
            gamma: store.take(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: store.take(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "group norm over {} channels, input has {c}",
                self.channels
            )));
        }
        let grouped = x.reshape((b, self.groups, c / self.groups * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let norm = norm.reshape((b, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(norm.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Batch normalization for NCHW tensors with running statistics.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (detached, torch-style unbiased variance); eval mode
/// normalizes with the stored estimates. The running buffers live in the
/// store as frozen parameters, so they serialize with the model but never
/// reach the optimizer.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean_name: String,
    running_var_name: String,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let running_mean_name = format!("{name}.running_mean");
        let running_var_name = format!("{name}.running_var");
        store.take_frozen(&running_mean_name, &[channels], Init::Zeros)?;
        store.take_frozen(&running_var_name, &[channels], Init::Const(1.0))?;
        Ok(Self {
            gamma: store.take(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: store.take(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean_name,
            running_var_name,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, store: &mut ParamStore, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels, input has {c}",
                self.channels
            )));
        }
        let (mean, var) = if train {
            let mean = x.mean_keepdim(vec![0usize, 2, 3])?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(vec![0usize, 2, 3])?;
            self.update_running(store, &mean, &var, x)?;
            (mean, var)
        } else {
            let mean = store
                .get(&self.running_mean_name)
                .ok_or_else(|| Error::invalid("missing running mean"))?
                .reshape((1, c, 1, 1))?;
            let var = store
                .get(&self.running_var_name)
                .ok_or_else(|| Error::invalid("missing running var"))?
                .reshape((1, c, 1, 1))?;
            (mean, var)
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(norm.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    fn update_running(
        &self,
        store: &mut ParamStore,
        mean: &Tensor,
        var: &Tensor,
        x: &Tensor,
    ) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        let n = (b * h * w) as f64;
        if n < 2.0 {
            return Err(Error::invalid(
                "batch norm in train mode needs more than one value per channel",
            ));
        }
        let batch_mean = mean.detach().reshape(c)?;
        // Unbiased estimate for the running buffer, biased for normalization.
        let batch_var = (var.detach().reshape(c)? * (n / (n - 1.0)))?;
        let old_mean = store
            .get(&self.running_mean_name)
            .ok_or_else(|| Error::invalid("missing running mean"))?;
        let old_var = store
            .get(&self.running_var_name)
            .ok_or_else(|| Error::invalid("missing running var"))?;
        let m = self.momentum;
        let new_mean = ((old_mean * (1.0 - m))? + (batch_mean * m)?)?;
        let new_var = ((old_var * (1.0 - m))? + (batch_var * m)?)?;
        store.set(&self.running_mean_name, &new_mean)?;
        store.set(&self.running_var_name, &new_var)?;
        Ok(())
    }
}
