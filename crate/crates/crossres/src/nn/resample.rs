//! Differentiable spatial resizing.
//!
//! The backend's built-in nearest upsampling has no backward pass, so both
//! resize flavors are implemented as custom ops whose gradients scatter into
//! the same source positions (and with the same weights) the forward pass
//! read from.
//!
//! Index conventions, for input extent `h` and output extent `oh`:
//! * nearest: `src = floor(oy * h / oh)`, which is exact subsampling for
//!   integer ratios in both directions;
//! * bilinear: half-pixel centers, `sy = (oy + 0.5) * h / oh - 0.5`, clamped
//!   to the valid range, blending the two nearest rows/columns.
//!
//! f32 NCHW only.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

fn contiguous_f32<'a>(
    s: &'a CpuStorage,
    l: &Layout,
    what: &str,
) -> candle_core::Result<&'a [f32]> {
    if !l.is_contiguous() {
        candle_core::bail!("{what} must be contiguous");
    }
    let data = s.as_slice::<f32>()?;
    let n = l.shape().elem_count();
    Ok(&data[l.start_offset()..l.start_offset() + n])
}

struct ResizeNearest {
    out_h: usize,
    out_w: usize,
}

impl CustomOp1 for ResizeNearest {
    fn name(&self) -> &'static str {
        "resize-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let x = contiguous_f32(s, l, "resize input")?;
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![0.0f32; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    let ix = ox * w / ow;
                    dst[oy * ow + ox] = src[iy * w + ix];
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, oh, ow))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?;
        let dx = grad.apply_op1_no_bwd(&ResizeNearestGrad {
            in_h: arg.dim(2)?,
            in_w: arg.dim(3)?,
        })?;
        Ok(Some(dx))
    }
}

struct ResizeNearestGrad {
    in_h: usize,
    in_w: usize,
}

impl CustomOp1 for ResizeNearestGrad {
    fn name(&self) -> &'static str {
        "resize-nearest-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let dy = contiguous_f32(s, l, "resize grad")?;
        let (h, w) = (self.in_h, self.in_w);
        let mut dx = vec![0.0f32; b * c * h * w];
        for bc in 0..b * c {
            let src = &dy[bc * oh * ow..(bc + 1) * oh * ow];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    let ix = ox * w / ow;
                    dst[iy * w + ix] += src[oy * ow + ox];
                }
            }
        }
        Ok((CpuStorage::F32(dx), Shape::from((b, c, h, w))))
    }
}

/// Corner positions and weight for one output coordinate under the
/// half-pixel convention.
fn bilinear_axis(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f32) {
    let s = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
    let s = s.clamp(0.0, (in_n - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, (s - lo as f64) as f32)
}

struct ResizeBilinear {
    out_h: usize,
    out_w: usize,
}

impl CustomOp1 for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let x = contiguous_f32(s, l, "resize input")?;
        let (oh, ow) = (self.out_h, self.out_w);
        let ys: Vec<(usize, usize, f32)> = (0..oh).map(|o| bilinear_axis(o, oh, h)).collect();
        let xs: Vec<(usize, usize, f32)> = (0..ow).map(|o| bilinear_axis(o, ow, w)).collect();
        let mut out = vec![0.0f32; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, c, oh, ow))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?;
        let dx = grad.apply_op1_no_bwd(&ResizeBilinearGrad {
            in_h: arg.dim(2)?,
            in_w: arg.dim(3)?,
        })?;
        Ok(Some(dx))
    }
}

struct ResizeBilinearGrad {
    in_h: usize,
    in_w: usize,
}

impl CustomOp1 for ResizeBilinearGrad {
    fn name(&self) -> &'static str {
        "resize-bilinear-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let dy = contiguous_f32(s, l, "resize grad")?;
        let (h, w) = (self.in_h, self.in_w);
        let ys: Vec<(usize, usize, f32)> = (0..oh).map(|o| bilinear_axis(o, oh, h)).collect();
        let xs: Vec<(usize, usize, f32)> = (0..ow).map(|o| bilinear_axis(o, ow, w)).collect();
        let mut dx = vec![0.0f32; b * c * h * w];
        for bc in 0..b * c {
            let src = &dy[bc * oh * ow..(bc + 1) * oh * ow];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let g = src[oy * ow + ox];
                    dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                    dst[y1 * w + x0] += g * wy * (1.0 - wx);
                    dst[y1 * w + x1] += g * wy * wx;
                }
            }
        }
        Ok((CpuStorage::F32(dx), Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbor resize of an NCHW tensor to (out_h, out_w).
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(crate::error::Error::invalid("resize target must be non-empty"));
    }
    let x = x.contiguous()?;
    Ok(x.apply_op1(ResizeNearest { out_h, out_w })?)
}

/// Bilinear resize of an NCHW tensor to (out_h, out_w), half-pixel centers.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(crate::error::Error::invalid("resize target must be non-empty"));
    }
    let x = x.contiguous()?;
    Ok(x.apply_op1(ResizeBilinear { out_h, out_w })?)
}
