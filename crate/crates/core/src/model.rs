//! The segmentation network: a five-block convolutional backbone, an
//! FPN/PAN neck with SPPF, C2PSA and C3k2 blocks, and an attention head
//! that fuses three scales additively and emits full-resolution logits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layers::{C2psa, C3k2, ChannelAttention, Conv, ConvGnRelu, SelfAttention, Sppf};
use crate::nn::{relu, upsample_nearest};
use crate::params::{load_checkpoint, ParamBuilder, ParameterStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Base channel widths (at `width = 1.0`).
const STEM: usize = 32;
const LADDER: [usize; 5] = [64, 128, 256, 512, 512];
const HEAD_8: usize = 128;
const HEAD_16: usize = 256;
const HEAD_32: usize = 512;
const TAIL: usize = 64;
/// Spatial reduction of the finest head input.
const HEAD_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub width: f64,
    pub gn_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            input_size: 256,
            width: 1.0,
            gn_groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::Config(format!("width {} outside (0, 1]", self.width)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let tokens = (self.input_size / HEAD_STRIDE).pow(2);
        if tokens > crate::nn::layers::SA_MAX_TOKENS {
            return Err(Error::Config(format!(
                "input size {} gives {tokens} attention tokens at 1/8 scale",
                self.input_size
            )));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.gn_groups == 0 {
            return Err(Error::Config(
                "need in_channels >= 1, num_classes >= 2, gn_groups >= 1".into(),
            ));
        }
        for base in [STEM, TAIL].into_iter().chain(LADDER) {
            if (base as f64 * self.width).round() < 1.0 {
                return Err(Error::Config(format!(
                    "width {} shrinks a {base}-channel layer to nothing",
                    self.width
                )));
            }
        }
        if self.channels(HEAD_8) < crate::nn::layers::CA_RATIO {
            return Err(Error::Config(format!(
                "channel attention needs at least {} channels",
                crate::nn::layers::CA_RATIO
            )));
        }
        Ok(())
    }

    /// `round(base · width)` rounded up to a multiple of `gn_groups`,
    /// never below `gn_groups`.
    pub fn channels(&self, base: usize) -> usize {
        let g = self.gn_groups;
        let raw = (base as f64 * self.width).round() as usize;
        (raw.div_ceil(g) * g).max(g)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    keep: ConvGnRelu,
    down: ConvGnRelu,
}

/// Network structure. Parameters live in a separate [`ParameterStore`]
/// and are bound to a tape per forward pass.
#[derive(Debug, Clone)]
pub struct YmWml {
    cfg: ModelConfig,
    stem: ConvGnRelu,
    stages: Vec<Stage>,
    sppf: Sppf,
    c2psa: C2psa,
    fpn16: C3k2,
    fpn8: C3k2,
    pan_down8: ConvGnRelu,
    pan16: C3k2,
    pan_down16: ConvGnRelu,
    pan32: C3k2,
    ca8: ChannelAttention,
    ca16: ChannelAttention,
    ca32: ChannelAttention,
    proj32: Conv,
    sa16: SelfAttention,
    proj16: Conv,
    sa8: SelfAttention,
    tail_in: Conv,
    tail_out: Conv,
}

/// Knobs for diagnostics; the default is the normal forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every self-attention block by the identity.
    pub bypass_self_attention: bool,
}

/// Named intermediate shape (`stage`, `[N, C, H, W]`).
pub type Tap = (String, Vec<usize>);

pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<(YmWml, ParameterStore)> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let model = {
        let mut b = ParamBuilder::new(&mut store, rng);
        YmWml::build(cfg, &mut b)?
    };
    Ok((model, store))
}

impl YmWml {
    fn build(cfg: &ModelConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        let g = cfg.gn_groups;
        let ch = |base| cfg.channels(base);
        let stem = ConvGnRelu::build(b, "backbone.stem", cfg.in_channels, ch(STEM), 3, 1, g)?;
        let mut stages = Vec::with_capacity(LADDER.len());
        let mut prev = ch(STEM);
        for (i, &base) in LADDER.iter().enumerate() {
            let c = ch(base);
            let stage = b.scope(&format!("backbone.block{}", i + 1), |b| -> Result<Stage> {
                Ok(Stage {
                    keep: ConvGnRelu::build(b, "keep", prev, c, 3, 1, g)?,
                    down: ConvGnRelu::build(b, "down", c, c, 3, 2, g)?,
                })
            })?;
            stages.push(stage);
            prev = c;
        }
        let (b8, b16, b32) = (ch(LADDER[2]), ch(LADDER[3]), ch(LADDER[4]));
        let (h8, h16, h32) = (ch(HEAD_8), ch(HEAD_16), ch(HEAD_32));
        Ok(YmWml {
            cfg: cfg.clone(),
            stem,
            stages,
            sppf: Sppf::build(b, "neck.sppf", b32)?,
            c2psa: C2psa::build(b, "neck.c2psa", b32)?,
            fpn16: C3k2::build(b, "neck.fpn16", b32 + b16, h16, g)?,
            fpn8: C3k2::build(b, "neck.fpn8", h16 + b8, h8, g)?,
            pan_down8: ConvGnRelu::build(b, "neck.pan_down8", h8, h8, 3, 2, g)?,
            pan16: C3k2::build(b, "neck.pan16", h8 + h16, h16, g)?,
            pan_down16: ConvGnRelu::build(b, "neck.pan_down16", h16, h16, 3, 2, g)?,
            pan32: C3k2::build(b, "neck.pan32", h16 + b32, h32, g)?,
            ca8: ChannelAttention::build(b, "head.ca8", h8)?,
            ca16: ChannelAttention::build(b, "head.ca16", h16)?,
            ca32: ChannelAttention::build(b, "head.ca32", h32)?,
            proj32: Conv::build(b, "head.proj32", h32, h16, 1, 1)?,
            sa16: SelfAttention::build(b, "head.sa16", h16)?,
            proj16: Conv::build(b, "head.proj16", h16, h8, 1, 1)?,
            sa8: SelfAttention::build(b, "head.sa8", h8)?,
            tail_in: Conv::build(b, "head.tail_in", h8, ch(TAIL), 3, 1)?,
            tail_out: Conv::build(b, "head.tail_out", ch(TAIL), cfg.num_classes, 3, 1)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Raw logits `[N, K, S, S]` for images `[N, C_in, S, S]`.
    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        self.forward_with(tape, p, x, ForwardOptions::default(), None)
    }

    pub fn forward_with(
        &self,
        tape: &Tape,
        p: &[Var],
        x: Var,
        opts: ForwardOptions,
        mut taps: Option<&mut Vec<Tap>>,
    ) -> Result<Var> {
        let shape = tape.shape(x)?;
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![0, self.cfg.in_channels, s, s],
                rhs: shape,
            });
        }
        let mut tap = |name: &str, v: Var| -> Result<()> {
            if let Some(t) = taps.as_deref_mut() {
                t.push((name.to_string(), tape.shape(v)?));
            }
            Ok(())
        };
        let attend = |sa: &SelfAttention, v: Var| -> Result<Var> {
            if opts.bypass_self_attention {
                Ok(v)
            } else {
                sa.forward(tape, p, v)
            }
        };

        // Backbone.
        let mut y = self.stem.forward(tape, p, x)?;
        tap("backbone/stem", y)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.keep.forward(tape, p, y)?;
            y = stage.down.forward(tape, p, y)?;
            tap(&format!("backbone/{}", 2usize << i), y)?;
            feats.push(y);
        }
        let (b8, b16, b32) = (feats[2], feats[3], feats[4]);

        // Neck: deepest scale, then top-down, then bottom-up.
        let x32 = self.sppf.forward(tape, p, b32)?;
        tap("neck/sppf", x32)?;
        let x32 = if opts.bypass_self_attention {
            self.c2psa_without_attention(tape, p, x32)?
        } else {
            self.c2psa.forward(tape, p, x32)?
        };
        tap("neck/c2psa", x32)?;
        let up = upsample_nearest(tape, x32, 2)?;
        let t16 = self.fpn16.forward(tape, p, tape.concat(&[up, b16], 1)?)?;
        tap("neck/T16", t16)?;
        let up = upsample_nearest(tape, t16, 2)?;
        let t8 = self.fpn8.forward(tape, p, tape.concat(&[up, b8], 1)?)?;
        tap("neck/T8", t8)?;
        let down = self.pan_down8.forward(tape, p, t8)?;
        let p16 = self.pan16.forward(tape, p, tape.concat(&[down, t16], 1)?)?;
        tap("neck/P16", p16)?;
        let down = self.pan_down16.forward(tape, p, p16)?;
        let p32 = self.pan32.forward(tape, p, tape.concat(&[down, x32], 1)?)?;
        tap("neck/P32", p32)?;

        // Head.
        tap("head/in8", t8)?;
        tap("head/in16", p16)?;
        tap("head/in32", p32)?;
        let a8 = self.ca8.forward(tape, p, t8)?;
        let a16 = self.ca16.forward(tape, p, p16)?;
        let a32 = self.ca32.forward(tape, p, p32)?;
        let up = upsample_nearest(tape, a32, 2)?;
        let f16 = tape.add(self.proj32.forward(tape, p, up)?, a16)?;
        let f16 = attend(&self.sa16, f16)?;
        tap("head/fuse16", f16)?;
        let up = upsample_nearest(tape, f16, 2)?;
        let f8 = tape.add(self.proj16.forward(tape, p, up)?, a8)?;
        let f8 = attend(&self.sa8, f8)?;
        tap("head/fuse8", f8)?;
        let z = relu(tape, self.tail_in.forward(tape, p, f8)?)?;
        tap("head/tail", z)?;
        let z = upsample_nearest(tape, z, HEAD_STRIDE)?;
        tap("head/up", z)?;
        let logits = self.tail_out.forward(tape, p, z)?;
        tap("head/out", logits)?;
        Ok(logits)
    }

    fn c2psa_without_attention(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let c = &self.c2psa;
        let y = c.input.forward(tape, p, x)?;
        c.output.forward(tape, p, y)
    }

    /// Inference without gradient recording.
    pub fn predict(&self, store: &ParameterStore, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(images.detached());
        let y = self.forward(&tape, &p, x)?;
        let out = tape.value(y)?.clone();
        Ok(out)
    }

    /// A zero-initialized store with this model's names and shapes.
    pub fn reference_store(cfg: &ModelConfig) -> Result<ParameterStore> {
        build_model(cfg, &mut Rng::new(0)).map(|(_, s)| s)
    }
}

/// Loads a checkpoint and checks it against the parameter layout of `cfg`.
pub fn load_checkpoint_for(cfg: &ModelConfig, path: &Path) -> Result<ParameterStore> {
    let store = load_checkpoint(path)?;
    store.check_compatible(&YmWml::reference_store(cfg)?)?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub stage: String,
    pub spatial: usize,
    pub channels: usize,
}

/// Output shape of every stage, from the shape laws alone.
pub fn shape_report(cfg: &ModelConfig) -> Result<Vec<ShapeRow>> {
    cfg.validate()?;
    let s = cfg.input_size;
    let ch = |base| cfg.channels(base);
    let mut rows = Vec::new();
    let mut row = |stage: &str, spatial: usize, channels: usize| {
        rows.push(ShapeRow {
            stage: stage.to_string(),
            spatial,
            channels,
        })
    };
    row("input", s, cfg.in_channels);
    row("backbone/stem", s, ch(STEM));
    let mut spatial = s;
    for (i, &base) in LADDER.iter().enumerate() {
        // 3×3, pad 1, stride 2.
        spatial = crate::nn::conv_out_size(spatial, 3, 2, 1);
        row(&format!("backbone/{}", 2usize << i), spatial, ch(base));
    }
    let (s8, s16, s32) = (s / 8, s / 16, s / 32);
    row("neck/sppf", s32, ch(LADDER[4]));
    row("neck/c2psa", s32, ch(LADDER[4]));
    row("neck/T16", s16, ch(HEAD_16));
    row("neck/T8", s8, ch(HEAD_8));
    row("neck/P16", s16, ch(HEAD_16));
    row("neck/P32", s32, ch(HEAD_32));
    row("head/in8", s8, ch(HEAD_8));
    row("head/in16", s16, ch(HEAD_16));
    row("head/in32", s32, ch(HEAD_32));
    row("head/fuse16", s16, ch(HEAD_16));
    row("head/fuse8", s8, ch(HEAD_8));
    row("head/tail", s8, ch(TAIL));
    row("head/up", s, ch(TAIL));
    row("head/out", s, cfg.num_classes);
    Ok(rows)
}
