//! Local feature extractor: a strided stem convolution followed by the
//! configured MBConv (inverted residual) stages.
//!
//! Convolutions use symmetric `k/2` padding, which makes every output
//! dimension the ceiling division of the input by the stride.

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, Module};

use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm2d, Init, Mode, ParamStore};

use super::{expand_stages, BackboneConfig, MBConvSpec};

fn conv2d(
    ps: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Result<Conv2d> {
    let weight = ps.param(
        &format!("{prefix}.weight"),
        &[out_channels, in_channels / groups, kernel, kernel],
        Init::FanIn,
    )?;
    let bias = ps.param(&format!("{prefix}.bias"), &[out_channels], Init::Const(0.0))?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        dilation: 1,
        groups,
        ..Default::default()
    };
    Ok(Conv2d::new(weight, Some(bias), cfg))
}

/// Squeeze-and-excitation gate: global average pool, bottleneck, sigmoid
/// channel rescaling.
struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn new(ps: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            reduce: conv2d(ps, &format!("{prefix}.reduce"), channels, hidden, 1, 1, 1)?,
            expand: conv2d(ps, &format!("{prefix}.expand"), hidden, channels, 1, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let gate = self.reduce.forward(&pooled)?.silu()?;
        let gate = candle_nn::ops::sigmoid(&self.expand.forward(&gate)?)?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Inverted residual block: pointwise expansion, depthwise convolution,
/// squeeze-and-excitation, pointwise projection, dropout, and a skip
/// connection when the stride is one and channel counts match.
pub struct MBConv {
    spec: MBConvSpec,
    expand_conv: Conv2d,
    expand_bn: BatchNorm2d,
    dw_conv: Conv2d,
    dw_bn: BatchNorm2d,
    se: SqueezeExcite,
    project_conv: Conv2d,
    project_bn: BatchNorm2d,
    dropout_rate: f64,
}

impl MBConv {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        spec: MBConvSpec,
        dropout_rate: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let expanded = spec.in_channels * spec.expansion;
        Ok(Self {
            expand_conv: conv2d(
                ps,
                &format!("{prefix}.expand"),
                spec.in_channels,
                expanded,
                1,
                1,
                1,
            )?,
            expand_bn: BatchNorm2d::new(ps, &format!("{prefix}.expand_bn"), expanded)?,
            dw_conv: conv2d(
                ps,
                &format!("{prefix}.dw"),
                expanded,
                expanded,
                spec.kernel,
                spec.stride,
                expanded,
            )?,
            dw_bn: BatchNorm2d::new(ps, &format!("{prefix}.dw_bn"), expanded)?,
            se: SqueezeExcite::new(ps, &format!("{prefix}.se"), expanded, spec.se_reduction)?,
            project_conv: conv2d(
                ps,
                &format!("{prefix}.project"),
                expanded,
                spec.out_channels,
                1,
                1,
                1,
            )?,
            project_bn: BatchNorm2d::new(ps, &format!("{prefix}.project_bn"), spec.out_channels)?,
            dropout_rate,
            spec,
        })
    }

    pub fn spec(&self) -> &MBConvSpec {
        &self.spec
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "MBConv expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let inner = self.expand_conv.forward(x)?;
        let inner = self.expand_bn.forward(&inner, mode)?.silu()?;
        let inner = self.dw_conv.forward(&inner)?;
        let inner = self.dw_bn.forward(&inner, mode)?.silu()?;
        let inner = self.se.forward(&inner)?;
        let inner = self.project_conv.forward(&inner)?;
        let inner = self.project_bn.forward(&inner, mode)?;
        let inner = dropout(&inner, self.dropout_rate, mode)?;
        if self.spec.has_residual() {
            Ok((inner + x)?)
        } else {
            Ok(inner)
        }
    }
}

/// Stem convolution plus the expanded MBConv block sequence.
pub struct LocalExtractor {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<MBConv>,
    total_stride: usize,
}

impl LocalExtractor {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        dropout_rate: f64,
    ) -> Result<Self> {
        let stem_conv = conv2d(ps, &format!("{prefix}.stem"), 1, cfg.stem_channels, 3, 2, 1)?;
        let stem_bn = BatchNorm2d::new(ps, &format!("{prefix}.stem_bn"), cfg.stem_channels)?;
        let blocks = expand_stages(cfg.stem_channels, &cfg.stage_specs)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| MBConv::new(ps, &format!("{prefix}.block{i}"), spec, dropout_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem_conv,
            stem_bn,
            blocks,
            total_stride: cfg.total_stride(),
        })
    }

    pub fn forward(&self, images: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("extractor expects 1 input channel, got {c}")));
        }
        if h < self.total_stride || w < self.total_stride {
            return Err(Error::Shape(format!(
                "input {h}x{w} is smaller than the total stride {}",
                self.total_stride
            )));
        }
        let mut x = self.stem_conv.forward(images)?;
        x = self.stem_bn.forward(&x, mode)?.silu()?;
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x)
    }
}

/// One row of the extractor shape table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeEntry {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Traces output shapes through the configured extractor without touching
/// any tensors: every convolution maps `n` to `ceil(n / stride)`.
pub fn shape_trace(cfg: &BackboneConfig, height: usize, width: usize) -> Result<Vec<ShapeEntry>> {
    let stride = cfg.total_stride();
    if height < stride || width < stride {
        return Err(Error::Shape(format!(
            "input {height}x{width} is smaller than the total stride {stride}"
        )));
    }
    let mut entries = vec![ShapeEntry {
        name: "stem".into(),
        channels: cfg.stem_channels,
        height: ceil_div(height, 2),
        width: ceil_div(width, 2),
    }];
    for (i, spec) in expand_stages(cfg.stem_channels, &cfg.stage_specs)
        .iter()
        .enumerate()
    {
        let prev = entries.last().unwrap();
        entries.push(ShapeEntry {
            name: format!("block{i}"),
            channels: spec.out_channels,
            height: ceil_div(prev.height, spec.stride),
            width: ceil_div(prev.width, spec.stride),
        });
    }
    Ok(entries)
}
