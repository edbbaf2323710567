use candle_core::Tensor;

use super::ops::{self, Patch};
use super::params::{Init, Scope};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub patch: Patch,
}

impl Conv2d {
    /// Square kernel convolution with "same"-style padding chosen by the caller.
    pub fn new(scope: &Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::rect(scope, cin, cout, (k, k), (stride, stride), (pad, pad), Init::Uniform { fan_in: cin * k * k })
    }

    pub fn with_init(scope: &Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: Init) -> Result<Self> {
        Self::rect(scope, cin, cout, (k, k), (stride, stride), (pad, pad), init)
    }

    pub fn rect(
        scope: &Scope,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
        init: Init,
    ) -> Result<Self> {
        let weight = scope.tensor("weight", &[cout, cin, kh, kw], init)?;
        let bias = scope.tensor("bias", &[cout], Init::Zeros)?;
        Ok(Self { weight, bias, patch: Patch { kh, kw, sh, sw, ph, pw } })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.patch)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub patch: Patch,
}

impl ConvTranspose2d {
    pub fn new(scope: &Scope, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = scope.tensor("weight", &[cin, cout, k, k], Init::Uniform { fan_in: cin })?;
        let bias = scope.tensor("bias", &[cout], Init::Zeros)?;
        Ok(Self { weight, bias, patch: Patch::square(k, stride, 0) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv_transpose2d(x, &self.weight, Some(&self.bias), self.patch)
    }
}

/// Affine map on the last axis. The weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(scope, din, dout, Init::Uniform { fan_in: din })
    }

    pub fn with_init(scope: &Scope, din: usize, dout: usize, init: Init) -> Result<Self> {
        let weight = scope.tensor("weight", &[din, dout], init)?;
        let bias = scope.tensor("bias", &[dout], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().ok_or_else(|| shape_err!("linear: scalar input"))?;
        if din != self.in_dim() {
            return Err(shape_err!("linear: input width {din}, expected {}", self.in_dim()));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.contiguous()?.reshape((rows, din))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out)?)
    }
}

/// Layer norm over the channel axis of `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ChannelNorm {
    pub fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(Self { gamma: scope.tensor("gamma", &[c], Init::Ones)?, beta: scope.tensor("beta", &[c], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_channels(x, &self.gamma, &self.beta)
    }
}

/// Layer norm over the last axis of a token sequence.
#[derive(Debug, Clone)]
pub struct TokenNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl TokenNorm {
    pub fn new(scope: &Scope, c: usize) -> Result<Self> {
        Ok(Self { gamma: scope.tensor("gamma", &[c], Init::Ones)?, beta: scope.tensor("beta", &[c], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_last(x, &self.gamma, &self.beta)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&scope.sub("fc1"), din, hidden)?, fc2: Linear::new(&scope.sub("fc2"), hidden, dout)? })
    }

    pub fn with_zero_output(scope: &Scope, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.sub("fc1"), din, hidden)?,
            fc2: Linear::with_init(&scope.sub("fc2"), hidden, dout, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(x)?)?)
    }
}
