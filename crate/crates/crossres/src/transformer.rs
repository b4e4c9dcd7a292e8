//! Global-context branch: patch embedding, stacked pre-norm self-attention
//! blocks, and progressive upsampling that fuses against the diffusion
//! feature pyramid scale by scale.

use candle_core::{Tensor, D};

use crate::diffusion::DiffusionFeatures;
use crate::error::{Error, Result};
use crate::nn::blocks::{Conv2d, ConvBR, Linear, Mlp};
use crate::nn::norm::LayerNorm;
use crate::nn::params::{Init, ParamStore};
use crate::nn::resample::{resize_bilinear, resize_nearest};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub d: usize,
    pub patch_size: usize,
    /// MLP hidden width as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Learned positional encodings; disabled only for equivariance checks.
    pub positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            heads: 4,
            d: 128,
            patch_size: 8,
            mlp_ratio: 4,
            positional: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("transformer dims must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Patch tokens plus the grid they came from. Positional encodings are added
/// exactly once, inside [`PatchEmbed::forward`].
#[derive(Debug, Clone)]
pub struct TokenSequence {
    tokens: Tensor,
    grid: (usize, usize),
    patch_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid: (usize, usize), patch_size: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if grid.0 * grid.1 != n {
            return Err(Error::shape(format!(
                "{n} tokens cannot fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            tokens,
            grid,
            patch_size,
        })
    }

    /// (batch, tokens, width) tensor.
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn width(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    /// Tokens rearranged as a (batch, width, rows, cols) map.
    pub fn to_grid(&self) -> Result<Tensor> {
        let (b, _, d) = self.tokens.dims3()?;
        let (rows, cols) = self.grid;
        Ok(self
            .tokens
            .transpose(1, 2)?
            .reshape((b, d, rows, cols))?
            .contiguous()?)
    }
}

/// Non-overlapping patch projection plus a learned positional table per
/// grid shape.
pub struct PatchEmbed {
    proj: Conv2d,
    name: String,
    cfg: TransformerConfig,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let proj = Conv2d::new(
            store,
            &format!("{name}.proj"),
            3,
            cfg.d,
            cfg.patch_size,
            cfg.patch_size,
            0,
        )?;
        Ok(Self {
            proj,
            name: name.to_string(),
            cfg,
        })
    }

    pub fn forward(&self, store: &mut ParamStore, x: &Tensor) -> Result<TokenSequence> {
        let (b, _, h, w) = x.dims4()?;
        let p = self.cfg.patch_size;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (rows, cols) = (h / p, w / p);
        let n = rows * cols;
        let grid = self.proj.forward(x)?; // (b, d, rows, cols)
        let mut tokens = grid
            .reshape((b, self.cfg.d, n))?
            .transpose(1, 2)?
            .contiguous()?;
        if self.cfg.positional {
            let pos = store.take(
                &format!("{}.pos{rows}x{cols}", self.name),
                &[1, n, self.cfg.d],
                Init::Normal { std: 0.02 },
            )?;
            tokens = tokens.broadcast_add(&pos)?;
        }
        TokenSequence::new(tokens, (rows, cols), p)
    }
}

/// Softmax over the last dim built from differentiable primitives; the max
/// shift is detached, which leaves the gradient unchanged.
fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let qd = q.dims();
    let kd = k.dims();
    let vd = v.dims();
    if qd.len() < 2 || qd.len() != kd.len() || kd.len() != vd.len() {
        return Err(Error::shape(format!(
            "attention needs equal-rank inputs of rank >= 2, got {qd:?} {kd:?} {vd:?}"
        )));
    }
    let r = qd.len();
    if qd[r - 1] != kd[r - 1] {
        return Err(Error::shape(format!(
            "query width {} vs key width {}",
            qd[r - 1],
            kd[r - 1]
        )));
    }
    if kd[r - 2] != vd[r - 2] {
        return Err(Error::shape(format!(
            "{} keys vs {} values",
            kd[r - 2],
            vd[r - 2]
        )));
    }
    if qd[..r - 2] != kd[..r - 2] || kd[..r - 2] != vd[..r - 2] {
        return Err(Error::shape("attention batch dims differ".to_string()));
    }
    Ok(())
}

/// Scaled dot-product attention plus the row-stochastic weight matrix.
/// Inputs are (..., N, d_k); weights come back as (..., Nq, Nk).
pub fn attention_with_weights(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    check_attention_shapes(q, k, v)?;
    let d_k = q.dim(D::Minus1)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let scores = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)? * scale)?;
    let weights = softmax_last_dim(&scores)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

/// `Softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_with_weights(q, k, v)?.0)
}

struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d)?,
            out: Linear::new(store, &format!("{name}.out"), d, d)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dk = d / self.heads;
        Ok(x.reshape((b, n, self.heads, dk))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let q = self.split_heads(&self.wq.forward(x)?)?;
        let k = self.split_heads(&self.wk.forward(x)?)?;
        let v = self.split_heads(&self.wv.forward(x)?)?;
        let ctx = attention(&q, &k, &v)?; // (b, heads, n, dk)
        let merged = ctx.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.out.forward(&merged)
    }
}

struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d, cfg.heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.d, cfg.d * cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        Ok((&h + self.mlp.forward(&self.ln2.forward(&h)?)?)?)
    }
}

/// Stack of pre-norm blocks; depth 0 is the identity.
pub struct TransformerEncoder {
    blocks: Vec<Block>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block::new(store, &format!("{name}.block{i}"), cfg)?);
        }
        Ok(Self { blocks })
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let mut x = seq.tokens().clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        TokenSequence::new(x, seq.grid(), seq.patch_size())
    }
}

/// Progressive ×2 upsampling with per-scale ConvBR fusion against the five
/// diffusion maps, coarse to fine. The last width is the channel count of
/// the full-resolution representation used for prediction.
pub struct HierarchicalFusion {
    blocks: [ConvBR; 5],
    widths: [usize; 5],
}

impl HierarchicalFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        token_dim: usize,
        scale_channels: [usize; 5],
        widths: [usize; 5],
    ) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::invalid("fusion widths must be >= 1"));
        }
        let mk = |store: &mut ParamStore, i: usize, c_in: usize| {
            ConvBR::new(
                store,
                &format!("{name}.scale{i}"),
                c_in + scale_channels[i],
                widths[i],
            )
        };
        Ok(Self {
            blocks: [
                mk(store, 0, token_dim)?,
                mk(store, 1, widths[0])?,
                mk(store, 2, widths[1])?,
                mk(store, 3, widths[2])?,
                mk(store, 4, widths[3])?,
            ],
            widths,
        })
    }

    pub fn output_channels(&self) -> usize {
        self.widths[4]
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        seq: &TokenSequence,
        feats: &DiffusionFeatures,
        train: bool,
    ) -> Result<Tensor> {
        let (h, w) = feats.input_hw();
        let (rows, cols) = seq.grid();
        let p = seq.patch_size();
        if rows * p != h || cols * p != w {
            return Err(Error::shape(format!(
                "token grid {rows}x{cols} at patch {p} does not cover a {h}x{w} input"
            )));
        }
        let maps = feats.maps();
        let (_, _, f1h, f1w) = maps[0].dims4()?;
        let mut cur = resize_bilinear(&seq.to_grid()?, f1h, f1w)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                let (_, _, ch, cw) = cur.dims4()?;
                cur = resize_nearest(&cur, ch * 2, cw * 2)?;
            }
            let cat = Tensor::cat(&[&cur, &maps[i]], 1)?;
            cur = block.forward(store, &cat, train)?;
        }
        Ok(cur)
    }
}
