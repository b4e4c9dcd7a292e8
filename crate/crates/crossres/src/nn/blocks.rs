//! Small reusable layers: linear, conv + batch-norm + relu, transformer MLP,
//! and the sinusoidal timestep embedding.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::conv::conv2d;
use crate::nn::norm::BatchNorm2d;
use crate::nn::params::{Init, ParamStore};

/// Fully connected layer; accepts (.., D_in) and applies to the last axis.
pub struct Linear {
    w: Tensor,
    b: Tensor,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.take(
                &format!("{name}.weight"),
                &[d_out, d_in],
                Init::XavierUniform {
                    fan_in: d_in,
                    fan_out: d_out,
                },
            )?,
            b: store.take(&format!("{name}.bias"), &[d_out], Init::Zeros)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("scalar input to linear"))?;
        if last != self.d_in {
            return Err(Error::shape(format!(
                "linear expects {} input features, got {last}",
                self.d_in
            )));
        }
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((lead, self.d_in))?;
        let y = flat.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out;
        Ok(y.reshape(out_dims)?)
    }
}

/// 2-D convolution with bias.
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            w: store.take(
                &format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                Init::KaimingNormal { fan_in },
            )?,
            b: store.take(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.w, self.stride, self.padding)?;
        let c_out = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

/// 3x3 convolution, batch norm, ReLU: the fusion block used wherever
/// multi-scale features are merged.
pub struct ConvBR {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBR {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, 1, 1)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward(&self, store: &mut ParamStore, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(store, &y, train)?;
        Ok(y.relu()?)
    }
}

/// Transformer feed-forward: linear, GELU, linear.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu()?;
        self.fc2.forward(&h)
    }
}

/// Sinusoidal embedding of integer timesteps: first half sines, second half
/// cosines, frequencies log-spaced from 1 down to 1/10000.
pub fn timestep_embedding(steps: &[u32], dim: usize, device: &Device) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid("timestep embedding dim must be even"));
    }
    let half = dim / 2;
    let mut values = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            values.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            values.push((t * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(values, (steps.len(), dim), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testsupport::{gradcheck, rand_tensor};

    #[test]
    fn linear_matches_manual_matmul_and_keeps_leading_dims() {
        let mut store = ParamStore::new(1);
        let lin = Linear::new(&mut store, "l", 4, 3).unwrap();
        let x = rand_tensor(&[2, 5, 4], 2);
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 5, 3]);

        let w = store.get("l.weight").unwrap();
        let b = store.get("l.bias").unwrap();
        let manual = x
            .reshape((10, 4))
            .unwrap()
            .matmul(&w.t().unwrap())
            .unwrap()
            .broadcast_add(&b)
            .unwrap()
            .reshape((2, 5, 3))
            .unwrap();
        let d = (y - manual)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
        assert!(lin.forward(&rand_tensor(&[2, 5], 3)).is_err());
    }

    #[test]
    fn linear_gradcheck() {
        let mut store = ParamStore::new(2);
        let lin = Linear::new(&mut store, "l", 3, 2).unwrap();
        gradcheck(&[4, 3], 5, |x| lin.forward(x), 1e-2, 2e-2);
    }

    #[test]
    fn conv_block_applies_bias() {
        let mut store = ParamStore::new(3);
        let conv = Conv2d::new(&mut store, "c", 2, 3, 1, 1, 0).unwrap();
        // Parameter tensors share storage with the store's vars, so this
        // write is visible to the already-built layer.
        store
            .set(
                "c.bias",
                &Tensor::from_vec(vec![1.0f32, 2.0, 3.0], &[3], &Device::Cpu).unwrap(),
            )
            .unwrap();
        let x = Tensor::zeros(&[1, 2, 2, 2], candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..4], &[1.0; 4]);
        assert_eq!(&v[4..8], &[2.0; 4]);
        assert_eq!(&v[8..], &[3.0; 4]);
    }

    #[test]
    fn conv_bias_receives_gradient() {
        let mut store = ParamStore::new(4);
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1).unwrap();
        let x = rand_tensor(&[2, 2, 4, 4], 6);
        let loss = conv.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.trainable() {
            assert!(
                grads.get(var.as_tensor()).is_some(),
                "no gradient for {name}"
            );
        }
    }

    #[test]
    fn conv_br_shape_and_train_path() {
        let mut store = ParamStore::new(5);
        let block = ConvBR::new(&mut store, "f", 6, 4).unwrap();
        let x = rand_tensor(&[2, 6, 8, 8], 7);
        let y = block.forward(&mut store, &x, true).unwrap();
        assert_eq!(y.dims(), &[2, 4, 8, 8]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&u| u >= 0.0), "relu output must be non-negative");
        let y_eval = block.forward(&mut store, &x, false).unwrap();
        assert_eq!(y_eval.dims(), &[2, 4, 8, 8]);
    }

    #[test]
    fn mlp_gradcheck() {
        let mut store = ParamStore::new(6);
        let mlp = Mlp::new(&mut store, "m", 4, 8).unwrap();
        gradcheck(&[3, 4], 9, |x| mlp.forward(x), 1e-2, 2e-2);
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let emb = timestep_embedding(&[0, 1, 500, 999], 16, &Device::Cpu).unwrap();
        assert_eq!(emb.dims(), &[4, 16]);
        let v = emb.to_vec2::<f32>().unwrap();
        // t = 0: all sines are 0, all cosines are 1.
        assert!(v[0][..8].iter().all(|&u| u == 0.0));
        assert!(v[0][8..].iter().all(|&u| u == 1.0));
        for row in &v {
            assert!(row.iter().all(|&u| (-1.0..=1.0).contains(&u)));
        }
        // Distinct timesteps embed differently.
        assert_ne!(v[1], v[2]);
        assert!(timestep_embedding(&[1], 7, &Device::Cpu).is_err());
    }

    #[test]
    fn timestep_embedding_distinguishes_nearby_steps() {
        let emb = timestep_embedding(&(0..50).collect::<Vec<u32>>(), 32, &Device::Cpu).unwrap();
        let v = emb.to_vec2::<f32>().unwrap();
        for i in 0..49 {
            let d: f32 = v[i]
                .iter()
                .zip(&v[i + 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d > 1e-4, "steps {i} and {} embed too closely", i + 1);
        }
    }
}
