use candle_core::{Device, DType, Tensor};

use super::layers::Linear;
use super::ops;
use super::params::{Init, Scope};
use crate::error::{shape_err, Result};

/// Multi-head attention with separate query and key/value widths.
///
/// Queries are projected from `q_dim`, keys and values from `kv_dim`, both
/// into an internal width of `q_dim / downsample`. The output is projected back
/// to `q_dim`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

/// Intermediate values of one attention call, for inspection in tests.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Softmax weights `[B, heads, Tq, Tk]`.
    pub weights: Tensor,
    /// Value mixture before the output projection `[B, Tq, internal]`.
    pub mixture: Tensor,
    pub output: Tensor,
}

impl Attention {
    pub fn new(scope: &Scope, q_dim: usize, kv_dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        Self::build(scope, q_dim, kv_dim, heads, downsample, Init::Uniform { fan_in: q_dim / downsample.max(1) })
    }

    /// Same as [`Attention::new`] with a zero output projection, so the layer
    /// contributes nothing until trained.
    pub fn zero_output(scope: &Scope, q_dim: usize, kv_dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        Self::build(scope, q_dim, kv_dim, heads, downsample, Init::Zeros)
    }

    fn build(scope: &Scope, q_dim: usize, kv_dim: usize, heads: usize, downsample: usize, out_init: Init) -> Result<Self> {
        let internal = q_dim / downsample.max(1);
        if heads == 0 || internal % heads != 0 {
            return Err(shape_err!("attention: internal width {internal} not divisible by {heads} heads"));
        }
        Ok(Self {
            q_proj: Linear::new(&scope.sub("q_proj"), q_dim, internal)?,
            k_proj: Linear::new(&scope.sub("k_proj"), kv_dim, internal)?,
            v_proj: Linear::new(&scope.sub("v_proj"), kv_dim, internal)?,
            out_proj: Linear::with_init(&scope.sub("out_proj"), internal, q_dim, out_init)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn trace(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttentionTrace> {
        let (b, tq, _) = q.dims3()?;
        let (bk, tk, _) = k.dims3()?;
        if bk != b || v.dims3()?.1 != tk {
            return Err(shape_err!("attention: query batch {b}, key batch {bk}, value length mismatch"));
        }
        let qh = self.split_heads(&self.q_proj.forward(q)?)?;
        let kh = self.split_heads(&self.k_proj.forward(k)?)?;
        let vh = self.split_heads(&self.v_proj.forward(v)?)?;
        let d = qh.dim(3)?;
        let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        let weights = ops::softmax_last(&logits)?;
        let mixed = weights.matmul(&vh)?;
        let mixture = mixed.transpose(1, 2)?.contiguous()?.reshape((b, tq, self.heads * d))?;
        let output = self.out_proj.forward(&mixture)?;
        Ok(AttentionTrace { weights, mixture, output })
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.trace(q, k, v)?.output)
    }
}

/// Sinusoidal encoding of normalized 2-D coordinates into `dim` channels.
///
/// `coords` holds `(x, y)` pairs in `[0, 1]`. The layout per token is
/// `[sin(x w_k), cos(x w_k), sin(y w_k), cos(y w_k)]` over `dim / 4` frequencies.
pub fn sinusoidal_2d(coords: &[(f64, f64)], dim: usize) -> Result<Vec<f64>> {
    if dim % 4 != 0 || dim == 0 {
        return Err(shape_err!("positional encoding width {dim} must be a positive multiple of 4"));
    }
    let nf = dim / 4;
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        let (u, v) = (x * 64.0, y * 64.0);
        for axis in [u, v] {
            for k in 0..nf {
                let w = 1.0 / 10000f64.powf(k as f64 / nf as f64);
                out.push((axis * w).sin());
            }
            for k in 0..nf {
                let w = 1.0 / 10000f64.powf(k as f64 / nf as f64);
                out.push((axis * w).cos());
            }
        }
    }
    Ok(out)
}

/// Encoding of an `h x w` grid of cell centers as a `[1, h*w, dim]` token tensor.
pub fn grid_encoding(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)))
        .collect();
    let v = sinusoidal_2d(&coords, dim)?;
    Ok(Tensor::from_vec(v, (1, h * w, dim), device)?.to_dtype(dtype)?)
}
