//! Feature-map-to-token bridge between the convolutional extractor and the
//! transformer.

use candle_core::Tensor;
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{dropout, Init, Mode, ParamStore};

use super::{BackboneConfig, BridgeMode};

/// Turns a `(B, C, H, W)` feature map into `(B, N, d_model)` tokens.
pub struct Bridge {
    mode: BridgeMode,
    embed: Linear,
    mask_token: Option<Tensor>,
    pos_embed: Option<Tensor>,
    patch_size: usize,
    mask_fraction: f64,
    dropout_rate: f64,
    feat_c: usize,
    feat_h: usize,
    feat_w: usize,
    n_tokens: usize,
}

impl Bridge {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        dropout_rate: f64,
        feat_c: usize,
        feat_h: usize,
        feat_w: usize,
    ) -> Result<Self> {
        let (in_dim, n_tokens) = match cfg.bridge_mode {
            BridgeMode::ShapeFirst | BridgeMode::VintLike => (feat_c, feat_h * feat_w),
            BridgeMode::PatchFirst => {
                let p = cfg.patch_size;
                if p == 0 || !feat_h.is_multiple_of(p) || !feat_w.is_multiple_of(p) {
                    return Err(Error::Shape(format!(
                        "patch size {p} does not divide feature map {feat_h}x{feat_w}"
                    )));
                }
                (feat_c * p * p, (feat_h / p) * (feat_w / p))
            }
        };
        let w = ps.param(
            &format!("{prefix}.embed.weight"),
            &[cfg.d_model, in_dim],
            Init::FanIn,
        )?;
        let b = ps.param(&format!("{prefix}.embed.bias"), &[cfg.d_model], Init::Const(0.0))?;
        let mask_token = match cfg.bridge_mode {
            BridgeMode::VintLike => Some(ps.param(
                &format!("{prefix}.mask_token"),
                &[1, 1, cfg.d_model],
                Init::Normal(0.02),
            )?),
            _ => None,
        };
        let pos_embed = if cfg.positional_embedding {
            Some(ps.param(
                &format!("{prefix}.pos_embed"),
                &[1, n_tokens, cfg.d_model],
                Init::Normal(0.02),
            )?)
        } else {
            None
        };
        Ok(Self {
            mode: cfg.bridge_mode,
            embed: Linear::new(w, Some(b)),
            mask_token,
            pos_embed,
            patch_size: cfg.patch_size,
            mask_fraction: cfg.mask_fraction,
            dropout_rate,
            feat_c,
            feat_h,
            feat_w,
            n_tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Rearranges the feature map into the raw token matrix before embedding.
    fn tokenize(&self, features: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = features.dims4()?;
        if c != self.feat_c || h != self.feat_h || w != self.feat_w {
            return Err(Error::Shape(format!(
                "bridge built for {}x{}x{} features, got {c}x{h}x{w}",
                self.feat_c, self.feat_h, self.feat_w
            )));
        }
        match self.mode {
            BridgeMode::ShapeFirst | BridgeMode::VintLike => {
                // (B, C, H, W) -> (B, H*W, C): one token per spatial cell.
                Ok(features.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
            }
            BridgeMode::PatchFirst => {
                // Non-overlapping p x p patches, each flattened to C*p*p.
                let p = self.patch_size;
                let t = features
                    .reshape((b, c, h / p, p, w / p, p))?
                    .permute((0, 2, 4, 1, 3, 5))?
                    .contiguous()?;
                Ok(t.reshape((b, (h / p) * (w / p), c * p * p))?)
            }
        }
    }

    pub fn forward(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let raw = self.tokenize(features)?;
        let mut tokens = self.embed.forward(&raw)?;
        if let Some(mask_token) = &self.mask_token {
            let (b, n, d) = tokens.dims3()?;
            let k = (self.mask_fraction * n as f64).round() as usize;
            if k > 0 {
                let masked = mask_token.broadcast_as((b, k, d))?;
                tokens = Tensor::cat(&[&masked, &tokens.narrow(1, k, n - k)?], 1)?;
            }
        }
        if let Some(pos) = &self.pos_embed {
            tokens = tokens.broadcast_add(pos)?;
        }
        dropout(&tokens, self.dropout_rate, mode)
    }
}
