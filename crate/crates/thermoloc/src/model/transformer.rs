//! Mask-free transformer stack with a fused QKV projection.
//!
//! Query, key, and value come from a single linear map split three ways. The
//! block wiring is `z = f_forward(attn(y) + y) + attn(y) + y` with
//! pre-normalization inside both sublayers, and the stack ends with a final
//! layer normalization.

use candle_core::Tensor;
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{dropout, Init, LayerNorm, Mode, ParamStore};

use super::BackboneConfig;

const NORM_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e30;

fn linear(ps: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = ps.param(&format!("{prefix}.weight"), &[out_dim, in_dim], Init::FanIn)?;
    let b = ps.param(&format!("{prefix}.bias"), &[out_dim], Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

fn layer_norm(ps: &mut ParamStore, prefix: &str, dim: usize) -> Result<LayerNorm> {
    LayerNorm::new(ps, prefix, dim, NORM_EPS)
}

/// Multi-head self-attention with a fused QKV projection and scale
/// `(d_model / n_heads)^(-1/2)`.
pub struct Attention {
    fused_qkv: Linear,
    out_proj: Linear,
    n_heads: usize,
    head_dim: usize,
    scale: f64,
    attn_dropout: f64,
    use_mask: bool,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        let head_dim = cfg.d_model / cfg.n_heads;
        Ok(Self {
            fused_qkv: linear(ps, &format!("{prefix}.qkv"), cfg.d_model, 3 * cfg.d_model)?,
            out_proj: linear(ps, &format!("{prefix}.out"), cfg.d_model, cfg.d_model)?,
            n_heads: cfg.n_heads,
            head_dim,
            scale: (head_dim as f64).powf(-0.5),
            attn_dropout: cfg.attention_dropout,
            use_mask: cfg.use_mask,
        })
    }

    /// Splits the fused projection into per-head query, key, and value, each
    /// shaped `(B, heads, N, head_dim)`.
    pub fn project_qkv(&self, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, n, d) = tokens.dims3()?;
        let fused = self.fused_qkv.forward(tokens)?; // (B, N, 3D)
        let split = |i: usize| -> Result<Tensor> {
            Ok(fused
                .narrow(2, i * d, d)?
                .reshape((b, n, self.n_heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        Ok((split(0)?, split(1)?, split(2)?))
    }

    pub fn forward(&self, tokens: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        let (q, k, v) = self.project_qkv(tokens)?;
        let mut logits = (q.matmul(&k.transpose(2, 3)?)? * self.scale)?;
        if self.use_mask {
            logits = logits.broadcast_add(&causal_mask(n, tokens)?)?;
        }
        let weights = candle_nn::ops::softmax(&logits, 3)?;
        let weights = dropout(&weights, self.attn_dropout, mode)?;
        let ctx = weights.matmul(&v)?; // (B, heads, N, head_dim)
        let merged = ctx.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.out_proj.forward(&merged)?)
    }
}

/// Additive mask blocking attention to later positions, the ablation stand-in
/// for a masked attention mechanism.
fn causal_mask(n: usize, reference: &Tensor) -> Result<Tensor> {
    let mut data = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    Ok(Tensor::from_vec(data, (1, 1, n, n), reference.device())?
        .to_dtype(reference.dtype())?)
}

/// Two linear layers around a GELU, applied per token.
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
    dropout_rate: f64,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        mlp_ratio: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        let hidden = d_model * mlp_ratio;
        Ok(Self {
            fc1: linear(ps, &format!("{prefix}.fc1"), d_model, hidden)?,
            fc2: linear(ps, &format!("{prefix}.fc2"), hidden, d_model)?,
            dropout_rate,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu()?;
        let h = dropout(&h, self.dropout_rate, mode)?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// One transformer block with pre-normalized sublayers.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
    standard_residual: bool,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        dropout_rate: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: layer_norm(ps, &format!("{prefix}.norm1"), cfg.d_model)?,
            attn: Attention::new(ps, &format!("{prefix}.attn"), cfg)?,
            norm2: layer_norm(ps, &format!("{prefix}.norm2"), cfg.d_model)?,
            ffn: FeedForward::new(ps, &format!("{prefix}.ffn"), cfg.d_model, cfg.mlp_ratio, dropout_rate)?,
            standard_residual: cfg.standard_residual,
        })
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }

    pub fn forward(&self, y: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let attn_out = self.attn.forward(&self.norm1.forward(y)?, mode)?;
        let skip = (attn_out.clone() + y)?;
        let ffn_out = self.ffn.forward(&self.norm2.forward(&skip)?, mode)?;
        if self.standard_residual {
            // Conventional two-step residual; algebraically the same sum.
            Ok((ffn_out + skip)?)
        } else {
            Ok(((ffn_out + attn_out)? + y)?)
        }
    }
}

/// The block stack followed by the final layer normalization.
pub struct Transformer {
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

impl Transformer {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        dropout_rate: f64,
    ) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("transformer depth must be >= 1".into()));
        }
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(ps, &format!("{prefix}.block{i}"), cfg, dropout_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            final_norm: layer_norm(ps, &format!("{prefix}.norm"), cfg.d_model)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn forward(&self, tokens: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut z = tokens.clone();
        for block in &self.blocks {
            z = block.forward(&z, mode)?;
        }
        self.final_norm.forward(&z)
    }
}
