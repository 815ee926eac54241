//! Distortion guidance generator.
//!
//! Turns the single-channel distortion map into a C-channel guidance field.
//! Because the distortion map is constant along each row, the whole pipeline
//! is built to keep rows constant: pooling collapses the width, expansion
//! restores it, and every convolution pads by replication so no horizontal
//! variation can enter. The output modulates attention keys and values.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tape::{PadMode, Tape, Var};

/// Latitude-wise pooling: per-channel row means, `[b, c, h, w] -> [b, c, h, 1]`.
pub fn lwp<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    tape.mean_axis(f, 3)
}

/// Latitude-wise expansion: duplicates each row value across the width,
/// `[b, c, h, 1] -> [b, c, h, w]`.
pub fn lwe<T: Scalar>(tape: &mut Tape<T>, v: Var, width: usize) -> Result<Var> {
    tape.expand(v, 3, width)
}

#[derive(Clone, Debug)]
pub struct Dgg {
    /// 3x3 conv lifting the 1-channel map to C channels
    expand_w: ParamId,
    expand_b: ParamId,
    /// 1x1 conv on the pooled latitude vectors
    lat_w: ParamId,
    lat_b: ParamId,
    /// channel attention: 1x1 conv after global average pooling
    attn_w: ParamId,
    attn_b: ParamId,
    /// depthwise-separable refinement
    dw_k: ParamId,
    pw_k: ParamId,
    pw_b: ParamId,
    channels: usize,
}

impl Dgg {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let c = channels;
        Dgg {
            expand_w: b.trunc_normal("expand.w", &[c, 1, 3, 3], 0.02),
            expand_b: b.zeros("expand.b", &[c, 1, 1]),
            lat_w: b.trunc_normal("lat.w", &[c, c, 1, 1], 0.02),
            lat_b: b.zeros("lat.b", &[c, 1, 1]),
            attn_w: b.trunc_normal("attn.w", &[c, c, 1, 1], 0.02),
            attn_b: b.zeros("attn.b", &[c, 1, 1]),
            dw_k: b.trunc_normal("dw.k", &[c, 3, 3], 0.02),
            pw_k: b.trunc_normal("pw.k", &[c, c, 1, 1], 0.02),
            pw_b: b.zeros("pw.b", &[c, 1, 1]),
            channels,
        }
    }

    /// Channel gate from the distortion features: sigmoid(conv1x1(GAP(f))),
    /// one weight in (0, 1) per channel, shaped `[b, c, 1, 1]`.
    pub fn attention_branch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        f: Var,
    ) -> Result<Var> {
        let gap = tape.mean_axis(f, 3)?;
        let gap = tape.mean_axis(gap, 2)?;
        let a = tape.conv2d_valid(gap, bind.var(self.attn_w), 1, 1)?;
        let a = tape.add(a, bind.var(self.attn_b))?;
        Ok(tape.sigmoid(a))
    }

    /// Guidance `[b, c, h, w]` from a distortion map `[b, 1, h, w]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, d: Var) -> Result<Var> {
        let shape = tape.shape(d).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim("dgg input (expected [b,1,h,w])", &shape, &[1]));
        }
        let width = shape[3];

        let f = tape.conv2d(d, bind.var(self.expand_w), 1, PadMode::Replicate)?;
        let f = tape.add(f, bind.var(self.expand_b))?;
        let f = tape.relu(f);

        // latitude branch
        let v = lwp(tape, f)?;
        let v = tape.conv2d_valid(v, bind.var(self.lat_w), 1, 1)?;
        let v = tape.add(v, bind.var(self.lat_b))?;
        let v = tape.relu(v);
        let g = lwe(tape, v, width)?;

        // channel attention gates the expanded features
        let w = self.attention_branch(tape, bind, f)?;
        let gated = tape.mul(g, w)?;

        // depthwise-separable refinement, replicate padding
        let refined =
            tape.depthwise_separable_conv(gated, bind.var(self.dw_k), bind.var(self.pw_k), PadMode::Replicate)?;
        tape.add(refined, bind.var(self.pw_b))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}
