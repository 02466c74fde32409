//! Backbone building blocks: convolution stem, basic residual block, the
//! gated-convolution family of token mixers (plain, SSM, DSSM), FFN and
//! strided downsampling.
//!
//! Every block maps `[Nb, C, H, W]` to `[Nb, C, H, W]` except the stem (`/4`)
//! and downsampling (`/2`). Mixer-style blocks follow
//!
//! ```text
//! X' = LN(X)
//! Z1 = σ(Conv1d(Linear(X')))        (then SSM or DSSM when present)
//! Z2 = σ(Linear(X'))
//! Y  = Linear(Z1 ⊙ Z2) + X
//! ```

use serde::{Deserialize, Serialize};

use crate::dssm::{AnchorVariant, DssmLayer};
use crate::error::{ensure, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, LayerNorm, Linear, ParamId};
use crate::ssm::{dt_rank, SsmLayer};
use crate::tensor::{self, Var};

pub const EXPAND: usize = 2;
pub const CONV1D_KERNEL: usize = 4;
pub const FFN_RATIO: usize = 4;
pub const STEM_MID: usize = 32;

/// Hyper-parameters shared by the SSM-bearing blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub state_size: usize,
    pub selective: bool,
    pub anchors: AnchorVariant,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            state_size: 16,
            selective: true,
            anchors: AnchorVariant::K9,
        }
    }
}

/// Two stride-2 `3×3` convolutions with batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ConvStem {
    pub fn new(init: &mut Init<'_>, in_channels: usize, out_channels: usize) -> Self {
        let mut s = init.sub("stem");
        Self {
            conv1: Conv2d::new(&mut s, "conv1", in_channels, STEM_MID, 3, 2, false),
            bn1: BatchNorm2d::new(&mut s, "bn1", STEM_MID),
            conv2: Conv2d::new(&mut s, "conv2", STEM_MID, out_channels, 3, 2, false),
            bn2: BatchNorm2d::new(&mut s, "bn2", out_channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let shape = ctx.value(image).shape().to_vec();
        ensure!(
            shape.len() == 4 && shape[2] % 4 == 0 && shape[3] % 4 == 0,
            "conv_stem",
            "input must be NCHW with H, W divisible by 4, got {shape:?}"
        );
        let mut x = image;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = tensor::relu(&mut ctx.tape, x);
        }
        Ok(x)
    }
}

/// ResNet-18 basic block with layer norm and GELU:
/// `GELU(LN(conv(GELU(LN(conv(X))))) + X)`.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
}

impl BasicBlock {
    /// The second norm's scale starts at zero, so the block starts as `GELU(X)`.
    pub fn new(init: &mut Init<'_>, channels: usize) -> Self {
        let conv1 = Conv2d::new(init, "conv1", channels, channels, 3, 1, false);
        let norm1 = LayerNorm::new(init, "norm1", channels);
        let conv2 = Conv2d::new(init, "conv2", channels, channels, 3, 1, false);
        let norm2 = LayerNorm::new(init, "norm2", channels);
        init.store_mut().get_mut(norm2.gamma).data_mut().fill(0.0);
        Self { conv1, norm1, conv2, norm2 }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut y = self.conv1.forward(ctx, x)?;
        y = self.norm1.forward(ctx, y)?;
        y = tensor::gelu(&mut ctx.tape, y);
        y = self.conv2.forward(ctx, y)?;
        y = self.norm2.forward(ctx, y)?;
        let s = tensor::add(&mut ctx.tape, y, x)?;
        Ok(tensor::gelu(&mut ctx.tape, s))
    }
}

/// What sits on the `Z1` path after the gated convolution.
#[derive(Clone, Debug)]
pub enum Mixer {
    None,
    Ssm(SsmLayer),
    Dssm(DssmLayer),
}

/// Gated convolution block, optionally with an SSM or DSSM layer in `Z1`.
#[derive(Clone, Debug)]
pub struct MixerBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub gate: Linear,
    pub mixer: Mixer,
    pub out_proj: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Gated,
    Ssm,
    Dssm,
}

impl MixerBlock {
    pub fn new(init: &mut Init<'_>, channels: usize, kind: MixerKind, cfg: &MixerConfig) -> Self {
        let e = EXPAND * channels;
        let norm = LayerNorm::new(init, "norm", channels);
        let in_proj = Linear::new(init, "in_proj", channels, e, false);
        let bound = 1.0 / (CONV1D_KERNEL as f64).sqrt();
        let conv_w = init.uniform("conv1d.weight", &[e, CONV1D_KERNEL], bound);
        let conv_b = init.zeros("conv1d.bias", &[e]);
        let gate = Linear::new(init, "gate", channels, e, false);
        let rank = dt_rank(channels);
        let mixer = match kind {
            MixerKind::Gated => Mixer::None,
            MixerKind::Ssm => Mixer::Ssm(SsmLayer::new(&mut init.sub("ssm"), e, cfg.state_size, rank, cfg.selective)),
            MixerKind::Dssm => Mixer::Dssm(DssmLayer::new(
                &mut init.sub("dssm"),
                e,
                cfg.state_size,
                rank,
                cfg.anchors,
                cfg.selective,
            )),
        };
        let out_proj = Linear::zeros(init, "out_proj", e, channels, true);
        Self { norm, in_proj, conv_w, conv_b, gate, mixer, out_proj }
    }

    pub fn kind(&self) -> MixerKind {
        match self.mixer {
            Mixer::None => MixerKind::Gated,
            Mixer::Ssm(_) => MixerKind::Ssm,
            Mixer::Dssm(_) => MixerKind::Dssm,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let xn = self.norm.forward(ctx, x)?;
        let a = self.in_proj.forward(ctx, xn)?;
        let (w, b) = (ctx.param(self.conv_w), ctx.param(self.conv_b));
        let a = tensor::depthwise_causal_conv1d(&mut ctx.tape, a, w, b)?;
        let a = tensor::silu(&mut ctx.tape, a);
        let z1 = match &self.mixer {
            Mixer::None => a,
            Mixer::Ssm(s) => s.forward(ctx, a, a)?,
            Mixer::Dssm(d) => d.forward(ctx, a)?,
        };
        let g = self.gate.forward(ctx, xn)?;
        let z2 = tensor::silu(&mut ctx.tape, g);
        let z = tensor::mul(&mut ctx.tape, z1, z2)?;
        let y = self.out_proj.forward(ctx, z)?;
        tensor::add(&mut ctx.tape, y, x)
    }
}

/// `X + Linear(GELU(Linear(LN(X))))` with a 4× hidden width.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Self {
        let hidden = FFN_RATIO * channels;
        Self {
            norm: LayerNorm::new(init, "norm", channels),
            fc1: Linear::new(init, "fc1", channels, hidden, true),
            fc2: Linear::zeros(init, "fc2", hidden, channels, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.norm.forward(ctx, x)?;
        let y = self.fc1.forward(ctx, y)?;
        let y = tensor::gelu(&mut ctx.tape, y);
        let y = self.fc2.forward(ctx, y)?;
        tensor::add(&mut ctx.tape, y, x)
    }
}

/// Strided `3×3` convolution halving the spatial extent.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv2d::new(init, "conv", c_in, c_out, 3, 2, true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.value(x).shape().to_vec();
        ensure!(
            shape.len() == 4 && shape[2] % 2 == 0 && shape[3] % 2 == 0,
            "downsample",
            "input must be NCHW with even H, W, got {shape:?}"
        );
        self.conv.forward(ctx, x)
    }
}

/// One stage element as named by the architecture string.
#[derive(Clone, Debug)]
pub enum Block {
    /// `C`
    Conv(BasicBlock),
    /// `D`: DSSM block followed by an FFN.
    Dssm { mixer: MixerBlock, ffn: Ffn },
    /// `G`
    Gated(MixerBlock),
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Conv(b) => b.forward(ctx, x),
            Self::Dssm { mixer, ffn } => {
                let y = mixer.forward(ctx, x)?;
                ffn.forward(ctx, y)
            }
            Self::Gated(b) => b.forward(ctx, x),
        }
    }
}
