//! Downstream segmentation decoder for transfer evaluation: a plain conv
//! pyramid from the encoder bottom back to full resolution, no skips, so
//! the segmentation quality reflects what the encoder itself learned.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Act, ConvSpec, ForwardCtx, ParamStore};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationDecoderConfig {
    /// Width of each upsampling stage, bottom first. Five stages undo the
    /// five encoder poolings.
    pub channels: Vec<usize>,
}

impl Default for SegmentationDecoderConfig {
    fn default() -> Self {
        SegmentationDecoderConfig {
            channels: vec![128, 64, 32, 16, 16],
        }
    }
}

impl SegmentationDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "segmentation decoder needs positive stage widths".into(),
            ));
        }
        Ok(())
    }
}

pub struct SegmentationDecoder {
    cfg: SegmentationDecoderConfig,
    blocks: Vec<[ConvSpec; 2]>,
    out: ConvSpec,
    input_channels: usize,
}

impl SegmentationDecoder {
    pub fn new(cfg: SegmentationDecoderConfig, input_channels: usize) -> Result<Self> {
        cfg.validate()?;
        if input_channels == 0 {
            return Err(Error::Config("decoder input channels must be positive".into()));
        }
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut cin = input_channels;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            blocks.push([
                ConvSpec::same(format!("seg.b{}.c1", i + 1), cin, cout, true, Act::Relu),
                ConvSpec::same(format!("seg.b{}.c2", i + 1), cout, cout, true, Act::Relu),
            ]);
            cin = cout;
        }
        let out = ConvSpec::same("seg.out", cin, 1, false, Act::None);
        Ok(SegmentationDecoder {
            cfg,
            blocks,
            out,
            input_channels,
        })
    }

    pub fn config(&self) -> &SegmentationDecoderConfig {
        &self.cfg
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for block in &self.blocks {
            for spec in block {
                spec.register(ps, rng);
            }
        }
        self.out.register(ps, rng);
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("seg.")
    }

    /// Decode bottom features (N,C,h,w) into foreground probabilities
    /// (N,1,h*2^k,w*2^k) for k upsampling stages.
    pub fn forward<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        bottom: Tensor<'g, F>,
    ) -> Result<Tensor<'g, F>> {
        let s = bottom.shape();
        if s.len() != 4 || s[1] != self.input_channels {
            return Err(Error::invalid(
                "segmentation decoder input",
                format!("expected (N,{},h,w), got {:?}", self.input_channels, s),
            ));
        }
        let mut y = bottom;
        for block in &self.blocks {
            for spec in block {
                y = spec.apply(ctx, y);
            }
            y = y.upsample_bilinear2();
        }
        Ok(self.out.apply(ctx, y).sigmoid())
    }
}
