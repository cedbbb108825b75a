use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamBuilder};
use crate::Result;

/// Affine map with weight stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.get((d_out, d_in), "weight", Init::Normal { std: 0.02 })?;
        let bias = if bias {
            Some(pb.get(d_out, "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn with_init(pb: &ParamBuilder, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: pb.get((d_out, d_in), "weight", init)?,
            bias: Some(pb.get(d_out, "bias", Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get(dim, "weight", Init::Ones)?,
            bias: pb.get(dim, "bias", Init::Zeros)?,
            eps,
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

/// Multi-head self-attention with a fused qkv projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, d_model: usize, n_heads: usize, qkv_name: &str, proj_name: &str) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&pb.pp(qkv_name), d_model, 3 * d_model, true)?,
            proj: Linear::new(&pb.pp(proj_name), d_model, d_model, true)?,
            n_heads,
        })
    }

    /// `x` is `(B, S, d)`; `mask`, when given, is an additive `(S, S)` bias.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let h = self.n_heads;
        let hd = d / h;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * d, d)?
                .reshape((b, s, h, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
///
/// Parameter names follow the GPT-2 layout (`ln_1`, `attn.c_attn`,
/// `attn.c_proj`, `ln_2`, `mlp.c_fc`, `mlp.c_proj`).
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_1: LayerNorm,
    pub attn: SelfAttention,
    pub ln_2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

impl Block {
    pub fn new(pb: &ParamBuilder, d_model: usize, n_heads: usize, eps: f64) -> Result<Self> {
        let mlp = pb.pp("mlp");
        Ok(Self {
            ln_1: LayerNorm::new(&pb.pp("ln_1"), d_model, eps)?,
            attn: SelfAttention::new(&pb.pp("attn"), d_model, n_heads, "c_attn", "c_proj")?,
            ln_2: LayerNorm::new(&pb.pp("ln_2"), d_model, eps)?,
            fc: Linear::new(&mlp.pp("c_fc"), d_model, 4 * d_model, true)?,
            proj: Linear::new(&mlp.pp("c_proj"), 4 * d_model, d_model, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln_1.forward(x)?, mask)?)?;
        let hidden = self.fc.forward(&self.ln_2.forward(&x)?)?.gelu()?;
        Ok((&x + self.proj.forward(&hidden)?)?)
    }
}

/// Additive `(S, S)` mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(s: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = (0..s)
        .flat_map(|i| (0..s).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (s, s), device)?.to_dtype(dtype)?)
}

/// Fixed sinusoidal position table `(len, d)`.
pub fn sinusoidal_encoding(len: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = vec![0f32; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            values[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(values, (len, d), device)?.to_dtype(dtype)?)
}
