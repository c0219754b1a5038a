//! Parameterized building blocks. Each block registers its tensors through a
//! [`ParamBuilder`] and runs against a binding (`&[Var]` in store order).

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tape::{Tape, Var};

use super::activation::{relu, sigmoid_op, softmax};
use super::conv::conv2d;
use super::norm::{group_norm, groups_for, GN_EPS};
use super::pool::{global_avg_pool, max_pool2d, scale_channels};

/// Channel-attention reduction ratio.
pub const CA_RATIO: usize = 4;
/// Query/key width divisor in self-attention.
pub const SA_QK_DIVISOR: usize = 8;
/// Largest token count self-attention accepts.
pub const SA_MAX_TOKENS: usize = 4096;

fn shape4(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    let s = tape.shape(x)?;
    s.as_slice()
        .try_into()
        .map_err(|_| Error::invalid("layer", format!("expected NCHW input, got {s:?}")))
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Conv {
                weight: b.kaiming_uniform("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel)?,
                bias: b.constant("bias", &[c_out], 0.0)?,
                c_in,
                c_out,
                kernel,
                stride,
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        conv2d(tape, x, p[self.weight.index()], p[self.bias.index()], self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize, preferred_groups: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(GroupNorm {
                gamma: b.constant("gamma", &[channels], 1.0)?,
                beta: b.constant("beta", &[channels], 0.0)?,
                groups: groups_for(channels, preferred_groups),
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        group_norm(
            tape,
            x,
            p[self.gamma.index()],
            p[self.beta.index()],
            self.groups,
            GN_EPS,
        )
    }
}

/// conv → GroupNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvGnRelu {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvGnRelu {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ConvGnRelu {
                conv: Conv::build(b, "conv", c_in, c_out, kernel, stride)?,
                norm: GroupNorm::build(b, "gn", c_out, groups)?,
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        relu(tape, y)
    }
}

/// Squeeze-and-excitation gate: GAP → 1×1 (C→C/r) → ReLU → 1×1 (C/r→C) →
/// sigmoid, then channel-wise scaling of the input.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Conv,
    pub expand: Conv,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        if channels < CA_RATIO {
            return Err(Error::invalid(
                "channel_attention",
                format!("{channels} channels below reduction ratio {CA_RATIO}"),
            ));
        }
        let hidden = channels / CA_RATIO;
        b.scope(name, |b| {
            Ok(ChannelAttention {
                reduce: Conv::build(b, "reduce", channels, hidden, 1, 1)?,
                expand: Conv::build(b, "expand", hidden, channels, 1, 1)?,
                channels,
            })
        })
    }

    /// The per-(sample, channel) gate in (0, 1), shape `[N, C]`.
    pub fn gate(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let [n, c, _, _] = shape4(tape, x)?;
        if c != self.channels {
            return Err(Error::invalid(
                "channel_attention",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let pooled = global_avg_pool(tape, x)?;
        let pooled = tape.reshape(pooled, &[n, c, 1, 1])?;
        let h = relu(tape, self.reduce.forward(tape, p, pooled)?)?;
        let z = self.expand.forward(tape, p, h)?;
        let g = sigmoid_op(tape, z)?;
        tape.reshape(g, &[n, c])
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let gate = self.gate(tape, p, x)?;
        scale_channels(tape, x, gate)
    }
}

/// Single-head non-local block over the H·W positions:
/// `x + gain · fold(V · softmax_rows(Qᵀ K / sqrt(d)) ᵀ)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub gain: ParamId,
    pub channels: usize,
    pub qk_channels: usize,
}

impl SelfAttention {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        let qk = (channels / SA_QK_DIVISOR).max(1);
        b.scope(name, |b| {
            Ok(SelfAttention {
                query: Conv::build(b, "query", channels, qk, 1, 1)?,
                key: Conv::build(b, "key", channels, qk, 1, 1)?,
                value: Conv::build(b, "value", channels, channels, 1, 1)?,
                gain: b.constant("gain", &[1], 0.0)?,
                channels,
                qk_channels: qk,
            })
        })
    }

    /// Row-stochastic attention matrix `[N, T, T]`.
    pub fn attention(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(tape, x)?;
        let tokens = h * w;
        if tokens > SA_MAX_TOKENS {
            return Err(Error::invalid(
                "self_attention",
                format!("{tokens} tokens exceed the {SA_MAX_TOKENS} limit"),
            ));
        }
        if c != self.channels {
            return Err(Error::invalid(
                "self_attention",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let d = self.qk_channels;
        let q = tape.reshape(self.query.forward(tape, p, x)?, &[n, d, tokens])?;
        let k = tape.reshape(self.key.forward(tape, p, x)?, &[n, d, tokens])?;
        let scores = tape.bmm(q, k, true, false)?;
        let scores = tape.mul_scalar(scores, 1.0 / (d as f64).sqrt())?;
        softmax(tape, scores, 2)
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(tape, x)?;
        let attn = self.attention(tape, p, x)?;
        let v = tape.reshape(self.value.forward(tape, p, x)?, &[n, c, h * w])?;
        let mixed = tape.bmm(v, attn, false, true)?;
        let mixed = tape.reshape(mixed, &[n, c, h, w])?;
        let scaled = tape.scale_by(mixed, p[self.gain.index()])?;
        tape.add(x, scaled)
    }
}

/// 3×3 conv → GN → ReLU → 3×3 conv → GN, plus identity residual.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv,
    pub norm1: GroupNorm,
    pub conv2: Conv,
    pub norm2: GroupNorm,
}

impl Bottleneck {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Bottleneck {
                conv1: Conv::build(b, "conv1", channels, channels, 3, 1)?,
                norm1: GroupNorm::build(b, "gn1", channels, groups)?,
                conv2: Conv::build(b, "conv2", channels, channels, 3, 1)?,
                norm2: GroupNorm::build(b, "gn2", channels, groups)?,
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, p, x)?;
        let y = relu(tape, self.norm1.forward(tape, p, y)?)?;
        let y = self.conv2.forward(tape, p, y)?;
        let y = self.norm2.forward(tape, p, y)?;
        tape.add(x, y)
    }
}

/// CSP split block: 1×1 in, half the channels through two bottlenecks,
/// concat of the untouched half and both bottleneck outputs, 1×1 out.
#[derive(Debug, Clone)]
pub struct C3k2 {
    pub input: Conv,
    pub blocks: [Bottleneck; 2],
    pub output: Conv,
    pub c_out: usize,
}

impl C3k2 {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            return Err(Error::invalid("c3k2", format!("odd output width {c_out}")));
        }
        let half = c_out / 2;
        b.scope(name, |b| {
            Ok(C3k2 {
                input: Conv::build(b, "cv1", c_in, c_out, 1, 1)?,
                blocks: [
                    Bottleneck::build(b, "m0", half, groups)?,
                    Bottleneck::build(b, "m1", half, groups)?,
                ],
                output: Conv::build(b, "cv2", 3 * half, c_out, 1, 1)?,
                c_out,
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let half = self.c_out / 2;
        let y = self.input.forward(tape, p, x)?;
        let a = tape.slice(y, 1, 0, half)?;
        let b0 = tape.slice(y, 1, half, half)?;
        let b1 = self.blocks[0].forward(tape, p, b0)?;
        let b2 = self.blocks[1].forward(tape, p, b1)?;
        let cat = tape.concat(&[a, b1, b2], 1)?;
        self.output.forward(tape, p, cat)
    }
}

/// CSP block with a self-attention branch on half the channels.
#[derive(Debug, Clone)]
pub struct C2psa {
    pub input: Conv,
    pub attention: SelfAttention,
    pub output: Conv,
    pub channels: usize,
}

impl C2psa {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::invalid("c2psa", format!("odd width {channels}")));
        }
        b.scope(name, |b| {
            Ok(C2psa {
                input: Conv::build(b, "cv1", channels, channels, 1, 1)?,
                attention: SelfAttention::build(b, "attn", channels / 2)?,
                output: Conv::build(b, "cv2", channels, channels, 1, 1)?,
                channels,
            })
        })
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let half = self.channels / 2;
        let y = self.input.forward(tape, p, x)?;
        let a = tape.slice(y, 1, 0, half)?;
        let b = tape.slice(y, 1, half, half)?;
        let b = self.attention.forward(tape, p, b)?;
        let cat = tape.concat(&[a, b], 1)?;
        self.output.forward(tape, p, cat)
    }
}

pub const SPPF_POOL: usize = 5;

/// 1×1 (C→C/2), three serial 5×5 same-size max pools, concat of all four
/// (2C channels), 1×1 back to C.
#[derive(Debug, Clone)]
pub struct Sppf {
    pub input: Conv,
    pub output: Conv,
}

impl Sppf {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::invalid("sppf", format!("odd width {channels}")));
        }
        b.scope(name, |b| {
            Ok(Sppf {
                input: Conv::build(b, "cv1", channels, channels / 2, 1, 1)?,
                output: Conv::build(b, "cv2", 2 * channels, channels, 1, 1)?,
            })
        })
    }

    /// The four concatenated branches before the output projection.
    pub fn branches(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let y0 = self.input.forward(tape, p, x)?;
        let pad = SPPF_POOL / 2;
        let y1 = max_pool2d(tape, y0, SPPF_POOL, 1, pad)?;
        let y2 = max_pool2d(tape, y1, SPPF_POOL, 1, pad)?;
        let y3 = max_pool2d(tape, y2, SPPF_POOL, 1, pad)?;
        tape.concat(&[y0, y1, y2, y3], 1)
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let cat = self.branches(tape, p, x)?;
        self.output.forward(tape, p, cat)
    }
}
