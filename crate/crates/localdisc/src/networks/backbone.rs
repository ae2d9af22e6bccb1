//! Two-headed U-Net backbone: a width-scaled VGG-16 encoder, a skip-wired
//! decoder back to full resolution, and pixel-wise embedding and clustering
//! heads on the shared feature map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Act, ConvSpec, ForwardCtx, ParamStore};
use crate::autodiff::{Scalar, Tensor};
use crate::core_math::{diff, NORM_EPS};
use crate::error::{Error, Result};

/// VGG-16 convolution widths per block, before scaling.
const VGG_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Image channels, 3 for RGB.
    pub input_channels: usize,
    /// Multiplier on the VGG-16 widths; 0.25 gives the 16..128 stack.
    pub width_scale: f64,
    /// Skip-connected decoder stages between the bottom and half resolution.
    pub decoder_blocks: usize,
    /// Embedding dimension D of the pixel feature head.
    pub embedding_dim: usize,
    /// Cluster count M of the soft assignment head.
    pub cluster_count: usize,
    /// Batch-normalize encoder convs; when off they carry biases instead.
    pub encoder_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            width_scale: 0.25,
            decoder_blocks: 4,
            embedding_dim: 32,
            cluster_count: 8,
            encoder_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::Config(format!(
                "width_scale must be in (0, 1], got {}",
                self.width_scale
            )));
        }
        if self.decoder_blocks != 4 {
            return Err(Error::Config(format!(
                "decoder_blocks must be 4, one per pooling stage above the bottom \
                 (the fifth stage feeds the final full-resolution skip); got {}",
                self.decoder_blocks
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.cluster_count < 2 {
            return Err(Error::Config(format!(
                "cluster_count must be at least 2, got {}",
                self.cluster_count
            )));
        }
        Ok(())
    }

    fn scale(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }
}

/// Both pixel-wise outputs of one forward pass.
pub struct NetworkOutput<'g, F: Scalar> {
    /// (N,D,H,W), unit L2 norm over channels at every pixel.
    pub embedding: Tensor<'g, F>,
    /// (N,M,H,W), nonnegative channels summing to 1 at every pixel.
    pub clustering: Tensor<'g, F>,
}

pub struct Backbone {
    cfg: BackboneConfig,
    enc: Vec<Vec<ConvSpec>>,
    dec: Vec<Vec<ConvSpec>>,
    emb: [ConvSpec; 2],
    clu: [ConvSpec; 2],
    bottom_channels: usize,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(5);
        let mut cin = cfg.input_channels;
        for (bi, block) in VGG_BLOCKS.iter().enumerate() {
            let mut specs = Vec::with_capacity(block.len());
            for (ci, &base) in block.iter().enumerate() {
                let cout = cfg.scale(base);
                specs.push(ConvSpec::same(
                    format!("encoder.b{}.c{}", bi + 1, ci + 1),
                    cin,
                    cout,
                    cfg.encoder_norm,
                    Act::Relu,
                ));
                cin = cout;
            }
            enc.push(specs);
        }
        // Channels of each block's pre-pool feature map, f1..f5.
        let e: Vec<usize> = enc
            .iter()
            .map(|b| b.last().expect("nonempty block").cout)
            .collect();

        // Decoder stage i doubles resolution and concatenates f(5-i); the
        // widths step back down the encoder ladder.
        let outs = [e[3], e[2], e[1], e[1]];
        let mut dec = Vec::with_capacity(4);
        let mut prev = e[4];
        for i in 0..4 {
            let skip = e[4 - i];
            let out = outs[i];
            dec.push(vec![
                ConvSpec::same(format!("decoder.d{}.c1", i + 1), prev + skip, out, true, Act::Relu),
                ConvSpec::same(format!("decoder.d{}.c2", i + 1), out, out, true, Act::Relu),
            ]);
            prev = out;
        }
        // Final upsample concatenates f1, so the heads see half-block-2
        // plus block-1 channels at full resolution.
        let head_in = prev + e[0];
        let d = cfg.embedding_dim;
        let m = cfg.cluster_count;
        let emb = [
            ConvSpec::same("head.emb.c1", head_in, d, true, Act::Relu),
            ConvSpec::same("head.emb.c2", d, d, false, Act::None),
        ];
        let clu = [
            ConvSpec::same("head.clu.c1", head_in, m, true, Act::Relu),
            ConvSpec::same("head.clu.c2", m, m, false, Act::None),
        ];
        Ok(Backbone {
            cfg,
            enc,
            dec,
            emb,
            clu,
            bottom_channels: e[4],
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Channel count of the encoder bottom, the downstream decoder's input.
    pub fn bottom_channels(&self) -> usize {
        self.bottom_channels
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for block in &self.enc {
            for spec in block {
                spec.register(ps, rng);
            }
        }
        for block in &self.dec {
            for spec in block {
                spec.register(ps, rng);
            }
        }
        for spec in self.emb.iter().chain(self.clu.iter()) {
            spec.register(ps, rng);
        }
    }

    /// Parameter name prefixes making up the encoder, for freezing.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    fn check_input<F: Scalar>(&self, x: Tensor<'_, F>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(Error::invalid(
                "backbone input",
                format!(
                    "expected (N,{},H,W), got {:?}",
                    self.cfg.input_channels, s
                ),
            ));
        }
        if s[2] == 0 || s[3] == 0 || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::invalid(
                "backbone input",
                format!("H and W must be positive multiples of 32, got {}x{}", s[2], s[3]),
            ));
        }
        Ok(())
    }

    /// Encoder alone: pre-pool feature maps f1..f5 plus the pooled bottom.
    pub fn encode<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        x: Tensor<'g, F>,
    ) -> Result<(Vec<Tensor<'g, F>>, Tensor<'g, F>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(5);
        let mut y = x;
        for block in &self.enc {
            for spec in block {
                y = spec.apply(ctx, y);
            }
            skips.push(y);
            y = y.maxpool2();
        }
        Ok((skips, y))
    }

    fn decode<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        skips: &[Tensor<'g, F>],
        bottom: Tensor<'g, F>,
    ) -> Tensor<'g, F> {
        let mut y = bottom;
        for (i, block) in self.dec.iter().enumerate() {
            y = ctx.g.concat(&[y.upsample_bilinear2(), skips[4 - i]], 1);
            for spec in block {
                y = spec.apply(ctx, y);
            }
        }
        ctx.g.concat(&[y.upsample_bilinear2(), skips[0]], 1)
    }

    /// Full pass: normalized embedding and cluster probability maps.
    pub fn forward<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        x: Tensor<'g, F>,
    ) -> Result<NetworkOutput<'g, F>> {
        let (skips, bottom) = self.encode(ctx, x)?;
        let features = self.decode(ctx, &skips, bottom);
        let eps = F::of_f64(NORM_EPS);

        let e = self.emb[1].apply(ctx, self.emb[0].apply(ctx, features));
        let embedding = diff::l2_normalize(e, 1, eps);

        // Softplus keeps every channel strictly positive, so the L1
        // normalization always yields a proper distribution.
        let c = self.clu[1].apply(ctx, self.clu[0].apply(ctx, features));
        let clustering = diff::l1_normalize(c.softplus(), 1, eps);

        Ok(NetworkOutput {
            embedding,
            clustering,
        })
    }
}
