//! Tensor-backend building blocks: seeded parameters, GEMM convolution,
//! differentiable resizing, normalization, small layers, and AdamW.
//!
//! Everything runs on CPU in f32 and is deterministic given the parameter
//! store seed.

pub mod blocks;
pub mod conv;
pub mod norm;
pub mod optim;
pub mod params;
pub mod resample;

#[cfg(test)]
pub(crate) mod testsupport {
    use candle_core::{Device, Tensor, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::error::Result;

    /// Uniform values in [-1, 1).
    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Central-difference gradient check of `sum(f(x) * r)` against
    /// autodiff, elementwise, with tolerance `abs_tol + rel_tol * |fd|`.
    pub fn gradcheck<F>(shape: &[usize], seed: u64, f: F, eps: f32, tol: f32)
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let x0 = rand_tensor(shape, seed);
        let x = Var::from_tensor(&x0).unwrap();
        let y = f(x.as_tensor()).unwrap();
        let r = rand_tensor(y.dims(), seed + 1);

        let loss = (y * &r).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let auto = grads
            .get(x.as_tensor())
            .expect("no gradient for input")
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();

        let loss_at = |values: &[f32]| -> f32 {
            let t = Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap();
            let y = f(&t).unwrap();
            (y * &r)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };

        let base: Vec<f32> = x0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let diff = (auto[i] - fd).abs();
            assert!(
                diff <= tol * (1.0 + fd.abs()),
                "gradient mismatch at {i}: autodiff {} vs finite-diff {fd} (diff {diff})",
                auto[i]
            );
        }
    }
}
