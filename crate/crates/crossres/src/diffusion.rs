//! Denoising diffusion branch: forward process, denoiser pretraining, and
//! frozen multi-scale feature extraction with fusion.
//!
//! The denoiser is a small encoder-decoder with skip connections whose five
//! decoder stages sit at strides 16, 8, 4, 2, 1 relative to the input. After
//! pretraining on noise prediction it is frozen and used purely as a feature
//! extractor: the decoder's intermediate maps are upsampled to input
//! resolution, concatenated, and fused by a ConvBR block into a single
//! D-channel map.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::blocks::{timestep_embedding, Conv2d, ConvBR, Linear};
use crate::nn::norm::GroupNorm;
use crate::nn::optim::AdamW;
use crate::nn::params::ParamStore;
use crate::nn::resample::{resize_bilinear, resize_nearest};

/// Decoder strides, outermost scale first.
pub const SCALE_STRIDES: [usize; 5] = [16, 8, 4, 2, 1];

/// DDPM noise schedule with 1-based step indexing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::invalid(format!(
                "step {t} outside schedule 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// Linear beta schedule; `alpha_bar` is the running product of `1 - beta`
/// accumulated in f64.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for t in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            t as f64 / (steps - 1) as f64
        };
        let b = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - b;
        beta.push(b);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

/// Closed-form forward process: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match input {:?}",
            eps.dims(),
            x0.dims()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let signal = (x0 * ab.sqrt())?;
    let noise = (eps * (1.0 - ab).sqrt())?;
    Ok((signal + noise)?)
}

/// Per-item variant used by training: item `i` of the batch is diffused to
/// its own step `ts[i]`.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match input {:?}",
            eps.dims(),
            x0.dims()
        )));
    }
    let (b, _, _, _) = x0.dims4()?;
    if ts.len() != b {
        return Err(Error::shape(format!(
            "{} steps for a batch of {b}",
            ts.len()
        )));
    }
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &t in ts {
        let ab = schedule.alpha_bar(t)?;
        sa.push(ab.sqrt() as f32);
        sn.push((1.0 - ab).sqrt() as f32);
    }
    let sa = Tensor::from_vec(sa, (b, 1, 1, 1), x0.device())?;
    let sn = Tensor::from_vec(sn, (b, 1, 1, 1), x0.device())?;
    Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
}

/// Architecture knobs for the denoiser and its feature path.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Schedule length T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Width of the encoder stem; deeper stages use small multiples.
    pub base_channels: usize,
    /// Decoder output channels, outermost scale (stride 16) first.
    pub scale_channels: [usize; 5],
    pub time_embed_dim: usize,
    /// Step used when extracting features from the frozen net.
    pub extraction_step: usize,
    /// Inject sampled noise during extraction instead of the deterministic
    /// zero-noise path.
    pub stochastic_extraction: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            base_channels: 32,
            scale_channels: [64, 48, 32, 24, 16],
            time_embed_dim: 64,
            extraction_step: 1000,
            stochastic_extraction: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("diffusion steps must be >= 1"));
        }
        if self.extraction_step < 1 || self.extraction_step > self.steps {
            return Err(Error::invalid(format!(
                "extraction step {} outside 1..={}",
                self.extraction_step, self.steps
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::invalid("base_channels must be >= 2"));
        }
        if self.scale_channels.contains(&0) {
            return Err(Error::invalid("scale channels must be >= 1"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels.is_multiple_of(g) {
            return g;
        }
    }
    1
}

/// Conv + GroupNorm + step conditioning + SiLU.
struct ScaleBlock {
    conv: Conv2d,
    gn: GroupNorm,
    time_proj: Linear,
}

impl ScaleBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        time_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride, 1)?,
            gn: GroupNorm::new(store, &format!("{name}.gn"), norm_groups(c_out), c_out)?,
            time_proj: Linear::new(store, &format!("{name}.time"), time_dim, c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let h = self.gn.forward(&h)?;
        let (b, c, _, _) = h.dims4()?;
        let cond = self.time_proj.forward(temb)?.reshape((b, c, 1, 1))?;
        Ok(h.broadcast_add(&cond)?.silu()?)
    }
}

/// Multi-scale feature maps from one extraction pass, outermost scale
/// (stride 16) first, detached from the denoiser graph.
#[derive(Debug, Clone)]
pub struct DiffusionFeatures {
    maps: [Tensor; 5],
    input_hw: (usize, usize),
}

impl DiffusionFeatures {
    /// Wraps externally built maps; each must sit at its scale's stride.
    /// Also how all-zero stand-in pyramids are made when the diffusion
    /// branch is ablated away.
    pub fn new(maps: [Tensor; 5], input_hw: (usize, usize)) -> Result<Self> {
        for (m, stride) in maps.iter().zip(SCALE_STRIDES) {
            let (_, _, h, w) = m.dims4()?;
            if (h, w) != (input_hw.0 / stride, input_hw.1 / stride) {
                return Err(Error::shape(format!(
                    "scale at stride {stride} is {h}x{w}, expected {}x{}",
                    input_hw.0 / stride,
                    input_hw.1 / stride
                )));
            }
        }
        Ok(Self { maps, input_hw })
    }

    pub fn maps(&self) -> &[Tensor; 5] {
        &self.maps
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn channel_counts(&self) -> Result<[usize; 5]> {
        let mut out = [0usize; 5];
        for (i, m) in self.maps.iter().enumerate() {
            out[i] = m.dim(1)?;
        }
        Ok(out)
    }
}

/// Noise-prediction encoder-decoder. Construct, pretrain with
/// [`ddpm_train_step`], then [`DenoiserNet::freeze`] before extraction.
pub struct DenoiserNet {
    prefix: String,
    stem: ScaleBlock,
    enc: [ScaleBlock; 4],
    dec: [ScaleBlock; 5],
    head: Conv2d,
    time_fc1: Linear,
    time_fc2: Linear,
    cfg: DiffusionConfig,
    frozen: bool,
}

impl DenoiserNet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_channels;
        let td = cfg.time_embed_dim;
        let [c1, c2, c3, c4, c5] = cfg.scale_channels;
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            prefix: prefix.to_string(),
            stem: ScaleBlock::new(store, &n("stem"), 3, w, 1, td)?,
            enc: [
                ScaleBlock::new(store, &n("enc1"), w, w, 2, td)?,
                ScaleBlock::new(store, &n("enc2"), w, 2 * w, 2, td)?,
                ScaleBlock::new(store, &n("enc3"), 2 * w, 2 * w, 2, td)?,
                ScaleBlock::new(store, &n("enc4"), 2 * w, 4 * w, 2, td)?,
            ],
            dec: [
                ScaleBlock::new(store, &n("dec1"), 4 * w, c1, 1, td)?,
                ScaleBlock::new(store, &n("dec2"), c1 + 2 * w, c2, 1, td)?,
                ScaleBlock::new(store, &n("dec3"), c2 + 2 * w, c3, 1, td)?,
                ScaleBlock::new(store, &n("dec4"), c3 + w, c4, 1, td)?,
                ScaleBlock::new(store, &n("dec5"), c4 + w, c5, 1, td)?,
            ],
            head: Conv2d::new(store, &n("head"), c5, 3, 1, 1, 0)?,
            time_fc1: Linear::new(store, &n("time_fc1"), td, td)?,
            time_fc2: Linear::new(store, &n("time_fc2"), td, td)?,
            cfg,
            frozen: false,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_prefix(&self) -> &str {
        &self.prefix
    }

    /// Marks the net frozen and removes its parameters from the trainable
    /// set. Irreversible for this instance.
    pub fn freeze(&mut self, store: &mut ParamStore) {
        store.freeze_prefix(&format!("{}.", self.prefix));
        self.frozen = true;
    }

    fn time_embedding(&self, ts: &[u32], store: &ParamStore) -> Result<Tensor> {
        let raw = timestep_embedding(ts, self.cfg.time_embed_dim, store.device())?;
        let h = self.time_fc1.forward(&raw)?.silu()?;
        self.time_fc2.forward(&h)
    }

    /// Runs the full net: returns the noise prediction and the five decoder
    /// maps (not yet detached).
    fn run(&self, store: &ParamStore, x_t: &Tensor, ts: &[u32]) -> Result<(Tensor, [Tensor; 5])> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("denoiser expects 3 channels, got {c}")));
        }
        if !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::shape(format!(
                "input {h}x{w} must be divisible by 16"
            )));
        }
        if ts.len() != b {
            return Err(Error::shape(format!("{} steps for batch of {b}", ts.len())));
        }
        let temb = self.time_embedding(ts, store)?;
        let s0 = self.stem.forward(x_t, &temb)?; // stride 1
        let e1 = self.enc[0].forward(&s0, &temb)?; // 2
        let e2 = self.enc[1].forward(&e1, &temb)?; // 4
        let e3 = self.enc[2].forward(&e2, &temb)?; // 8
        let e4 = self.enc[3].forward(&e3, &temb)?; // 16

        let up = |t: &Tensor| -> Result<Tensor> {
            let (_, _, th, tw) = t.dims4()?;
            resize_nearest(t, th * 2, tw * 2)
        };
        let f1 = self.dec[0].forward(&e4, &temb)?;
        let f2 = self.dec[1].forward(&Tensor::cat(&[&up(&f1)?, &e3], 1)?, &temb)?;
        let f3 = self.dec[2].forward(&Tensor::cat(&[&up(&f2)?, &e2], 1)?, &temb)?;
        let f4 = self.dec[3].forward(&Tensor::cat(&[&up(&f3)?, &e1], 1)?, &temb)?;
        let f5 = self.dec[4].forward(&Tensor::cat(&[&up(&f4)?, &s0], 1)?, &temb)?;
        let eps = self.head.forward(&f5)?;
        Ok((eps, [f1, f2, f3, f4, f5]))
    }

    /// Noise prediction only.
    pub fn predict_noise(&self, store: &ParamStore, x_t: &Tensor, ts: &[u32]) -> Result<Tensor> {
        Ok(self.run(store, x_t, ts)?.0)
    }
}

/// One pretraining update: per-item uniform step, fresh Gaussian noise,
/// MSE between predicted and injected noise. Returns the pre-update loss.
pub fn ddpm_train_step(
    net: &DenoiserNet,
    store: &ParamStore,
    opt: &mut AdamW,
    batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if net.is_frozen() {
        return Err(Error::invalid("cannot train a frozen denoiser"));
    }
    let (b, c, h, w) = batch.dims4()?;
    let ts: Vec<usize> = (0..b)
        .map(|_| rng.random_range(1..=schedule.len()))
        .collect();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let eps_host: Vec<f32> = (0..b * c * h * w).map(|_| normal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps_host, (b, c, h, w), batch.device())?;
    let x_t = forward_diffuse_batch(batch, &ts, &eps, schedule)?;
    let ts_u32: Vec<u32> = ts.iter().map(|&t| t as u32).collect();
    let pred = net.predict_noise(store, &x_t, &ts_u32)?;
    let loss = (pred - &eps)?.sqr()?.mean_all()?;
    let loss_value = loss.to_scalar::<f32>()?;
    let grads = loss.backward()?;
    opt.step(&grads)?;
    Ok(loss_value)
}

/// Multi-scale features from the frozen net.
///
/// Deterministic mode (`noise == None`) diffuses with zero noise, making
/// the result a pure function of (parameters, input, step). The returned
/// maps are detached: downstream training cannot push gradients into the
/// frozen denoiser.
pub fn extract_features(
    net: &DenoiserNet,
    store: &ParamStore,
    x: &Tensor,
    step: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<DiffusionFeatures> {
    if !net.is_frozen() {
        return Err(Error::invalid(
            "feature extraction requires a frozen denoiser",
        ));
    }
    let ab = schedule.alpha_bar(step)?;
    let x_t = match noise {
        Some(eps) => forward_diffuse(x, step, eps, schedule)?,
        None => (x * ab.sqrt())?,
    };
    let (b, _, h, w) = x.dims4()?;
    let ts = vec![step as u32; b];
    let (_, maps) = net.run(store, &x_t, &ts)?;
    let detached = [
        maps[0].detach(),
        maps[1].detach(),
        maps[2].detach(),
        maps[3].detach(),
        maps[4].detach(),
    ];
    DiffusionFeatures::new(detached, (h, w))
}

/// Fusion of the five scales into one full-resolution map (Eq. 3 shape):
/// bilinear upsample, concatenate, ConvBR to `out_channels`.
pub struct FeatureFusion {
    block: ConvBR,
    in_channels: usize,
    out_channels: usize,
}

impl FeatureFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scale_channels: [usize; 5],
        out_channels: usize,
    ) -> Result<Self> {
        let in_channels = scale_channels.iter().sum();
        Ok(Self {
            block: ConvBR::new(store, name, in_channels, out_channels)?,
            in_channels,
            out_channels,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        feats: &DiffusionFeatures,
        train: bool,
    ) -> Result<Tensor> {
        let (h, w) = feats.input_hw();
        let mut upsampled = Vec::with_capacity(5);
        for m in feats.maps() {
            upsampled.push(resize_bilinear(m, h, w)?);
        }
        let refs: Vec<&Tensor> = upsampled.iter().collect();
        let cat = Tensor::cat(&refs, 1)?;
        if cat.dim(1)? != self.in_channels {
            return Err(Error::shape(format!(
                "fusion expects {} concatenated channels, got {}",
                self.in_channels,
                cat.dim(1)?
            )));
        }
        self.block.forward(store, &cat, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::AdamWConfig;
    use crate::nn::testsupport::rand_tensor;
    use candle_core::Device;
    use rand::SeedableRng;

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            steps: 50,
            base_channels: 4,
            scale_channels: [6, 5, 4, 3, 2],
            time_embed_dim: 8,
            extraction_step: 50,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_zero_noise_limit() {
        let s = make_linear_schedule(3, 1e-12, 1e-12).unwrap();
        for t in 1..=3 {
            assert!((s.alpha_bar(t).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_two_step_product() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.beta(1).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.beta(2).unwrap() - 0.2).abs() < 1e-15);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_product_identity_and_monotonicity() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
            prod *= 1.0 - b;
            let ab = s.alpha_bar(t).unwrap();
            assert!(
                ((ab - prod) / prod).abs() < 1e-12,
                "product identity broken at t={t}"
            );
            if t > 1 {
                assert!(ab < s.alpha_bar(t - 1).unwrap(), "alpha_bar must decrease");
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn diffuse_identity_and_pure_noise_limits() {
        let s = make_linear_schedule(3, 1e-12, 1e-12).unwrap();
        let x0 = rand_tensor(&[1, 3, 4, 4], 1);
        let zeros = x0.zeros_like().unwrap();
        let xt = forward_diffuse(&x0, 2, &zeros, &s).unwrap();
        let d = (xt - &x0)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6, "alpha_bar ~ 1 and eps = 0 must reproduce x0");

        let s = make_linear_schedule(10, 0.1, 0.3).unwrap();
        let eps = rand_tensor(&[1, 3, 4, 4], 2);
        let xt = forward_diffuse(&zeros, 5, &eps, &s).unwrap();
        let expect = (eps * (1.0 - s.alpha_bar(5).unwrap()).sqrt()).unwrap();
        let d = (xt - expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-7);
    }

    #[test]
    fn diffuse_rejects_bad_inputs() {
        let s = make_linear_schedule(10, 0.1, 0.3).unwrap();
        let x0 = rand_tensor(&[1, 3, 4, 4], 3);
        let eps = rand_tensor(&[1, 3, 4, 5], 4);
        assert!(forward_diffuse(&x0, 5, &eps, &s).is_err());
        let eps = rand_tensor(&[1, 3, 4, 4], 5);
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 11, &eps, &s).is_err());
    }

    #[test]
    fn diffuse_is_jointly_linear() {
        let s = make_linear_schedule(20, 0.05, 0.2).unwrap();
        let x0 = rand_tensor(&[2, 3, 4, 4], 6);
        let eps = rand_tensor(&[2, 3, 4, 4], 7);
        let a = 2.5f64;
        let left = forward_diffuse(
            &(&x0 * a).unwrap(),
            7,
            &(&eps * a).unwrap(),
            &s,
        )
        .unwrap();
        let right = (forward_diffuse(&x0, 7, &eps, &s).unwrap() * a).unwrap();
        let d = (left - right)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn diffuse_moments_match_marginal() {
        // x0 constant: mean sqrt(ab) x0, variance (1 - ab).
        let s = make_linear_schedule(100, 1e-3, 0.05).unwrap();
        let t = 60;
        let ab = s.alpha_bar(t).unwrap();
        let x0_val = 0.7f32;
        let n = 100_000usize;
        let x0 = Tensor::full(x0_val, &[1, 1, 250, 400], &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let eps_host: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps_host, (1, 1, 250, 400), &Device::Cpu).unwrap();
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let v = xt.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mean = v.iter().map(|&u| u as f64).sum::<f64>() / n as f64;
        let var = v
            .iter()
            .map(|&u| (u as f64 - mean) * (u as f64 - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let expect_mean = ab.sqrt() * x0_val as f64;
        let expect_var = 1.0 - ab;
        let se_mean = (expect_var / n as f64).sqrt();
        let se_var = expect_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - expect_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {expect_mean} (se {se_mean})"
        );
        assert!(
            (var - expect_var).abs() < 3.0 * se_var,
            "var {var} vs {expect_var} (se {se_var})"
        );
    }

    #[test]
    fn denoiser_scale_shapes_for_64px_input() {
        let mut store = ParamStore::new(1);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        net.freeze(&mut store);
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[2, 3, 64, 64], 8);
        let feats = extract_features(&net, &store, &x, 50, &s, None).unwrap();
        let sides: Vec<usize> = feats
            .maps()
            .iter()
            .map(|m| m.dims4().unwrap().2)
            .collect();
        assert_eq!(sides, vec![4, 8, 16, 32, 64]);
        assert_eq!(feats.channel_counts().unwrap(), tiny_cfg().scale_channels);
    }

    #[test]
    fn extraction_is_deterministic_and_step_sensitive() {
        let mut store = ParamStore::new(2);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        net.freeze(&mut store);
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[1, 3, 32, 32], 9);
        let a = extract_features(&net, &store, &x, 50, &s, None).unwrap();
        let b = extract_features(&net, &store, &x, 50, &s, None).unwrap();
        for (ma, mb) in a.maps().iter().zip(b.maps()) {
            let d = (ma - mb)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(d, 0.0, "deterministic extraction must be exact");
        }
        let c = extract_features(&net, &store, &x, 10, &s, None).unwrap();
        let d = (&a.maps()[4] - &c.maps()[4])
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 0.0, "step conditioning must influence features");
    }

    #[test]
    fn extraction_requires_frozen_and_training_requires_unfrozen() {
        let mut store = ParamStore::new(3);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[1, 3, 32, 32], 10);
        assert!(extract_features(&net, &store, &x, 5, &s, None).is_err());

        net.freeze(&mut store);
        let mut opt = AdamW::new(
            vec![(
                "dummy".into(),
                candle_core::Var::from_tensor(&rand_tensor(&[1], 0)).unwrap(),
            )],
            AdamWConfig::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ddpm_train_step(&net, &store, &mut opt, &x, &s, &mut rng).is_err());
        assert!(extract_features(&net, &store, &x, 0, &s, None).is_err());
    }

    #[test]
    fn frozen_denoiser_gets_no_gradients_downstream() {
        let mut store = ParamStore::new(4);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        net.freeze(&mut store);
        let fusion =
            FeatureFusion::new(&mut store, "fusion", tiny_cfg().scale_channels, 8).unwrap();
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[1, 3, 32, 32], 11);
        let feats = extract_features(&net, &store, &x, 25, &s, None).unwrap();
        let fused = fusion.forward(&mut store, &feats, true).unwrap();
        let loss = fused.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // No denoiser parameter may appear in the grad store; fusion params must.
        let trainable: Vec<String> = store.trainable().into_iter().map(|(n, _)| n).collect();
        assert!(trainable.iter().all(|n| !n.starts_with("denoiser.")));
        let fusion_w = store.get("fusion.conv.weight").unwrap();
        assert!(grads.get(&fusion_w).is_some(), "fusion must receive gradients");
    }

    #[test]
    fn zeroed_head_gives_unit_mse() {
        let mut store = ParamStore::new(5);
        let net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        // Zero the prediction head: output is exactly zero, so the loss is
        // the mean of eps^2, which concentrates near 1.
        let wdims = store.get("denoiser.head.weight").unwrap().dims().to_vec();
        store
            .set(
                "denoiser.head.weight",
                &Tensor::zeros(wdims, candle_core::DType::F32, &Device::Cpu).unwrap(),
            )
            .unwrap();
        let s = net.config().schedule().unwrap();
        let params = store.trainable();
        let mut opt = AdamW::new(params, AdamWConfig { lr: 0.0, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = rand_tensor(&[16, 3, 32, 32], 13);
        let loss = ddpm_train_step(&net, &store, &mut opt, &batch, &s, &mut rng).unwrap();
        // 16*3*32*32 = 49152 samples; 3 sigma of the mean of squares ~ 0.019.
        assert!((loss - 1.0).abs() < 0.05, "loss {loss} should be near 1.0");
    }

    #[test]
    fn pretraining_halves_loss_on_fixed_batch() {
        // Needs some capacity at the finest scale, unlike the shape tests.
        let cfg = DiffusionConfig {
            steps: 50,
            base_channels: 8,
            scale_channels: [8, 8, 8, 8, 8],
            time_embed_dim: 16,
            extraction_step: 50,
            ..Default::default()
        };
        let mut store = ParamStore::new(6);
        let net = DenoiserNet::new(&mut store, "denoiser", cfg).unwrap();
        let s = net.config().schedule().unwrap();
        let mut opt = AdamW::new(
            store.trainable(),
            AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
        )
        .unwrap();
        let batch = rand_tensor(&[4, 3, 32, 32], 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..500 {
            let loss = ddpm_train_step(&net, &store, &mut opt, &batch, &s, &mut rng).unwrap();
            assert!(loss.is_finite() && loss >= 0.0);
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(
            last < 0.5 * first,
            "loss should halve: first {first}, last {last}"
        );
    }

    #[test]
    fn fusion_output_matches_input_resolution() {
        let mut store = ParamStore::new(7);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        net.freeze(&mut store);
        let fusion =
            FeatureFusion::new(&mut store, "fusion", tiny_cfg().scale_channels, 12).unwrap();
        assert_eq!(
            fusion.input_channels(),
            tiny_cfg().scale_channels.iter().sum::<usize>()
        );
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[2, 3, 48, 48], 16);
        let feats = extract_features(&net, &store, &x, 30, &s, None).unwrap();
        let fused = fusion.forward(&mut store, &feats, false).unwrap();
        assert_eq!(fused.dims(), &[2, 12, 48, 48]);
    }

    #[test]
    fn fusion_of_zero_features_is_zero() {
        let mut store = ParamStore::new(8);
        let fusion = FeatureFusion::new(&mut store, "fusion", [2, 2, 2, 2, 2], 4).unwrap();
        let zeros = |h: usize| {
            Tensor::zeros(&[1, 2, h, h], candle_core::DType::F32, &Device::Cpu).unwrap()
        };
        let feats = DiffusionFeatures::new(
            [zeros(2), zeros(4), zeros(8), zeros(16), zeros(32)],
            (32, 32),
        )
        .unwrap();
        let fused = fusion.forward(&mut store, &feats, false).unwrap();
        let m = fused
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn features_reject_inconsistent_provenance() {
        let zeros = |h: usize| {
            Tensor::zeros(&[1, 2, h, h], candle_core::DType::F32, &Device::Cpu).unwrap()
        };
        // stride-8 map has the wrong side for a 32x32 input
        let bad = DiffusionFeatures::new(
            [zeros(2), zeros(8), zeros(8), zeros(16), zeros(32)],
            (32, 32),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn stochastic_extraction_differs_from_deterministic() {
        let mut store = ParamStore::new(9);
        let mut net = DenoiserNet::new(&mut store, "denoiser", tiny_cfg()).unwrap();
        net.freeze(&mut store);
        let s = net.config().schedule().unwrap();
        let x = rand_tensor(&[1, 3, 32, 32], 17);
        let det = extract_features(&net, &store, &x, 40, &s, None).unwrap();
        let eps = rand_tensor(&[1, 3, 32, 32], 18);
        let sto = extract_features(&net, &store, &x, 40, &s, Some(&eps)).unwrap();
        let d = (&det.maps()[4] - &sto.maps()[4])
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 0.0);
    }

}
