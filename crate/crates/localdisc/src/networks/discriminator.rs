//! Mask discriminator: a small strided conv stack that scores whether a
//! single-channel probability map looks like a plausible anatomical mask.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Act, ConvSpec, ForwardCtx, LinearSpec, ParamStore};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Negative slope shared by every discriminator activation.
const LEAKY_SLOPE: f64 = 0.2;
/// Conv stages followed by 2x2 max pooling.
const POOLED_STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Mask channels scored at once; 1 for a single structure map.
    pub input_channels: usize,
    /// Output widths of the conv stack; the first five are pooled.
    pub conv_channels: Vec<usize>,
    /// Widths of the fully connected tail; the last must be 1.
    pub fc_channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_channels: 1,
            conv_channels: vec![16, 32, 32, 32, 32, 64, 64],
            fc_channels: vec![32, 1],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.conv_channels.len() < POOLED_STAGES {
            return Err(Error::Config(format!(
                "need at least {POOLED_STAGES} conv stages, got {}",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.iter().chain(&self.fc_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.fc_channels.last() != Some(&1) {
            return Err(Error::Config("the final fc width must be 1".into()));
        }
        Ok(())
    }
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    convs: Vec<ConvSpec>,
    fcs: Vec<LinearSpec>,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut cin = cfg.input_channels;
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            convs.push(ConvSpec::same(
                format!("disc.c{}", i + 1),
                cin,
                cout,
                false,
                Act::Leaky(LEAKY_SLOPE),
            ));
            cin = cout;
        }
        // Spatial output is folded to 2x2 before the linear tail, which at
        // 64x64 input is exactly the post-pooling resolution.
        let mut fin = cin * 4;
        let mut fcs = Vec::with_capacity(cfg.fc_channels.len());
        for (i, &fout) in cfg.fc_channels.iter().enumerate() {
            let last = i + 1 == cfg.fc_channels.len();
            fcs.push(LinearSpec {
                name: format!("disc.fc{}", i + 1),
                fin,
                fout,
                act: if last { Act::None } else { Act::Leaky(LEAKY_SLOPE) },
            });
            fin = fout;
        }
        Ok(Discriminator { cfg, convs, fcs })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for spec in &self.convs {
            spec.register(ps, rng);
        }
        for spec in &self.fcs {
            spec.register(ps, rng);
        }
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("disc.")
    }

    /// Score maps as real: (N,C,H,W) in, probabilities (N,) out.
    pub fn forward<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        x: Tensor<'g, F>,
    ) -> Result<Tensor<'g, F>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(Error::invalid(
                "discriminator input",
                format!("expected (N,{},H,W), got {:?}", self.cfg.input_channels, s),
            ));
        }
        // Five pooling stages plus the final 2x2 pooled readout need at
        // least 64 pixels a side.
        if s[2] < 64 || s[3] < 64 || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::invalid(
                "discriminator input",
                format!("H and W must be multiples of 32, at least 64, got {}x{}", s[2], s[3]),
            ));
        }
        let n = s[0];
        let mut y = x;
        for (i, spec) in self.convs.iter().enumerate() {
            y = spec.apply(ctx, y);
            if i < POOLED_STAGES {
                y = y.maxpool2();
            }
        }
        let c = self.convs.last().expect("conv stack").cout;
        let mut v = y.adaptive_avg_pool(2).reshape(&[n, c * 4]);
        for spec in &self.fcs {
            v = spec.apply(ctx, v);
        }
        Ok(v.sigmoid().reshape(&[n]))
    }
}
