//! Differentiable tensor primitives used by every module.
//!
//! Convolutions are lowered onto a pair of mutually adjoint custom ops,
//! [`Im2Col`] and [`Col2Im`], followed by a single GEMM. The backward pass of
//! each op is the other op, so `conv2d` and `conv_transpose2d` get exact
//! gradients for free through the tensor graph.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::{shape_err, Result};

/// Geometry shared by the unfold/fold pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Patch {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self { kh: k, kw: k, sh: stride, sw: stride, ph: pad, pw: pad }
    }

    fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }
}

/// Unfold `[B, C, H, W]` into columns `[C*kh*kw, B*OH*OW]`.
struct Im2Col {
    patch: Patch,
}

/// Fold columns `[C*kh*kw, B*OH*OW]` back into `[B, C, H, W]`, summing overlaps.
struct Col2Im {
    patch: Patch,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
}

fn im2col_slice<T: Copy + Default>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    p: &Patch,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let l = oh * ow;
    let cols = b * l;
    let rows = c * p.kh * p.kw;
    let mut dst = vec![T::default(); rows * cols];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for i in 0..p.kh {
                for j in 0..p.kw {
                    let row = (ci * p.kh + i) * p.kw + j;
                    let out = &mut dst[row * cols + bi * l..row * cols + (bi + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * p.sh + i) as isize - p.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * p.sw + j) as isize - p.pw as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    p: &Patch,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let l = oh * ow;
    let cols = b * l;
    let mut dst = vec![T::default(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for i in 0..p.kh {
                for j in 0..p.kw {
                    let row = (ci * p.kh + i) * p.kw + j;
                    let col = &src[row * cols + bi * l..row * cols + (bi + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * p.sh + i) as isize - p.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &col[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * p.sw + j) as isize - p.pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let (oh, ow) = match self.patch.out_dims(h, w) {
            Some(d) => d,
            None => candle_core::bail!("im2col: kernel larger than padded input"),
        };
        let shape = Shape::from((c * self.patch.kh * self.patch.kw, b * oh * ow));
        let dims = (b, c, h, w);
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(im2col_slice(contiguous_slice(v, layout)?, dims, &self.patch, (oh, ow)))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(im2col_slice(contiguous_slice(v, layout)?, dims, &self.patch, (oh, ow)))
            }
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let fold = Col2Im { patch: self.patch, batch: b, channels: c, h, w };
        Ok(Some(grad_res.contiguous()?.apply_op1(fold)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (oh, ow) = match self.patch.out_dims(self.h, self.w) {
            Some(d) => d,
            None => candle_core::bail!("col2im: kernel larger than padded output"),
        };
        let (rows, cols) = layout.shape().dims2()?;
        if rows != self.channels * self.patch.kh * self.patch.kw || cols != self.batch * oh * ow {
            candle_core::bail!("col2im: column matrix {rows}x{cols} does not match geometry");
        }
        let dims = (self.batch, self.channels, self.h, self.w);
        let shape = Shape::from(dims);
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(col2im_slice(contiguous_slice(v, layout)?, dims, &self.patch, (oh, ow)))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(col2im_slice(contiguous_slice(v, layout)?, dims, &self.patch, (oh, ow)))
            }
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col { patch: self.patch })?))
    }
}

/// Unfold an image batch into GEMM columns.
pub fn im2col(x: &Tensor, patch: Patch) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col { patch })?)
}

/// Fold GEMM columns back into an image batch of the given size.
pub fn col2im(cols: &Tensor, patch: Patch, batch: usize, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(cols.contiguous()?.apply_op1(Col2Im { patch, batch, channels, h, w })?)
}

/// `[B, C, H, W]` -> `[C, B*H*W]`
fn channels_first_matrix(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if b == 1 {
        Ok(x.reshape((c, h * w))?)
    } else {
        Ok(x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?)
    }
}

/// `[C, B*H*W]` -> `[B, C, H, W]`
fn from_channels_first(m: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = m.dim(0)?;
    if b == 1 {
        Ok(m.reshape((1, c, h, w))?)
    } else {
        Ok(m.reshape((c, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// 2-D convolution. `weight` is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, patch: Patch) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(shape_err!("conv2d: input has {c} channels, kernel expects {cin}"));
    }
    if (kh, kw) != (patch.kh, patch.kw) {
        return Err(shape_err!("conv2d: kernel {kh}x{kw} does not match patch geometry"));
    }
    let (oh, ow) = patch
        .out_dims(h, w)
        .ok_or_else(|| shape_err!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"))?;
    let cols = if kh == 1 && kw == 1 && patch.sh == 1 && patch.sw == 1 && patch.ph == 0 && patch.pw == 0 {
        channels_first_matrix(x)?
    } else {
        im2col(x, patch)?
    };
    let wm = weight.reshape((cout, cin * kh * kw))?;
    let y = wm.matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((cout, 1))?)?,
        None => y,
    };
    from_channels_first(&y, b, oh, ow)
}

/// Transposed 2-D convolution (the adjoint of [`conv2d`] in its input).
/// `weight` is `[C_in, C_out, kh, kw]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, patch: Patch) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cin, cout, kh, kw) = weight.dims4()?;
    if cin != c {
        return Err(shape_err!("conv_transpose2d: input has {c} channels, kernel expects {cin}"));
    }
    let oh = (h - 1) * patch.sh + kh;
    let ow = (w - 1) * patch.sw + kw;
    if oh < 2 * patch.ph + 1 || ow < 2 * patch.pw + 1 {
        return Err(shape_err!("conv_transpose2d: padding too large"));
    }
    let (oh, ow) = (oh - 2 * patch.ph, ow - 2 * patch.pw);
    let wm = weight.reshape((cin, cout * kh * kw))?.t()?;
    let cols = wm.matmul(&channels_first_matrix(x)?)?;
    let y = col2im(&cols, patch, b, cout, oh, ow)?;
    match bias {
        Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Separable bilinear interpolation weights (half-pixel centers, edge clamped).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
        let frac = if i0 + 1 < inp { src - i0 as f64 } else { 0.0 };
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` as two matmuls.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let aw = Tensor::from_vec(bilinear_matrix(ow, w), (ow, w), dev)?.to_dtype(dt)?;
    let ah = Tensor::from_vec(bilinear_matrix(oh, h), (oh, h), dev)?.to_dtype(dt)?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw.t()?)?;
    let y = y.reshape((b * c, h, ow))?.transpose(1, 2)?.contiguous()?.reshape((b * c * ow, h))?;
    let y = y.matmul(&ah.t()?)?.reshape((b * c, ow, oh))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Non-overlapping mean pooling with kernel = stride = `k`.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("avg_pool: kernel {k} does not divide {h}x{w}"));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(k)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), built from differentiable primitives
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub const LN_EPS: f64 = 1e-6;

/// Layer normalization across the channel axis of `[B, C, H, W]`.
pub fn layer_norm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let mean = x.mean_keepdim(1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(1)?;
    let y = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    let y = y.broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?;
    Ok(y.broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}

/// Layer normalization across the last axis.
pub fn layer_norm_last(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let y = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(y.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// `[B, C, h, w]` -> `[B, h*w, C]`, row-major over the spatial grid.
pub fn tokenize_grid(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`tokenize_grid`].
pub fn detokenize_grid(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, c) = tokens.dims3()?;
    if t != h * w {
        return Err(shape_err!("detokenize: {t} tokens cannot fill a {h}x{w} grid"));
    }
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Flattened copy of a tensor as f64 values.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Error unless every element is finite.
pub fn ensure_finite(x: &Tensor, what: &'static str) -> Result<()> {
    let v = to_f64_vec(x)?;
    if v.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(crate::error::Error::NonFinite(what))
    }
}
