use candle_core::{Tensor, D};

use super::params::Params;
use crate::error::Result;

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, in_dim: usize, out_dim: usize, layer: usize) -> Result<Self> {
        Self::with_std(p, name, in_dim, out_dim, layer, 0.02)
    }

    pub fn with_std(
        p: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        layer: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = p.trunc_normal(&format!("{name}.weight"), &[out_dim, in_dim], std, layer, true)?;
        let bias = p.constant(&format!("{name}.bias"), &[out_dim], 0.0, layer)?;
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies `x·Wᵀ + b` over the last dimension of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, in_dim))?;
        let y = flat.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut Params, name: &str, dim: usize, layer: usize) -> Result<Self> {
        let weight = p.constant(&format!("{name}.weight"), &[dim], 1.0, layer)?;
        let bias = p.constant(&format!("{name}.bias"), &[dim], 0.0, layer)?;
        Ok(Self {
            weight,
            bias,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last dimension, built from
/// differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &mut Params, name: &str, dim: usize, heads: usize, layer: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(p, &format!("{name}.qkv"), dim, 3 * dim, layer)?,
            proj: Linear::new(p, &format!("{name}.proj"), dim, dim, layer)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let attn = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&attn)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}

#[derive(Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &mut Params, name: &str, dim: usize, hidden: usize, layer: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(p, &format!("{name}.fc1"), dim, hidden, layer)?,
            fc2: Linear::new(p, &format!("{name}.fc2"), hidden, dim, layer)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block.
#[derive(Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(p: &mut Params, name: &str, dim: usize, heads: usize, mlp_ratio: usize, layer: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(p, &format!("{name}.norm1"), dim, layer)?,
            attn: Attention::new(p, &format!("{name}.attn"), dim, heads, layer)?,
            norm2: LayerNorm::new(p, &format!("{name}.norm2"), dim, layer)?,
            mlp: Mlp::new(p, &format!("{name}.mlp"), dim, dim * mlp_ratio, layer)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Fixed 2-D sine-cosine position table of shape `(rows·cols, dim)`; the first
/// half of the channels encodes the row, the second half the column.
pub fn sincos_2d(dim: usize, rows: usize, cols: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "position embedding width must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}
