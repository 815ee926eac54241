//! Dynamic feature aggregation.
//!
//! Fuses the window-attention and deformable-attention features with
//! per-channel weights driven by how much the two branches disagree: global
//! averages of their difference and sum pass through a bottleneck that emits
//! two logits per channel, and a two-way softmax of those logits weighs the
//! branches.
//!
//! The output is computed as (f1 + f2)/2 + (Ms - 1/2) * (f1 - f2), which is
//! algebraically Ms*f1 + (1-Ms)*f2 but keeps two identities bit-exact:
//! equal inputs pass through unchanged, and tied logits give exactly the
//! arithmetic mean.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dfa {
    reduce_w: ParamId,
    reduce_b: ParamId,
    m_w: ParamId,
    m_b: ParamId,
    n_w: ParamId,
    n_b: ParamId,
    channels: usize,
    use_diff: bool,
}

impl Dfa {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        reduction: usize,
        use_diff: bool,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "dfa reduction {reduction} must divide channels {channels}"
            )));
        }
        let mid = channels / reduction;
        Ok(Dfa {
            reduce_w: b.trunc_normal("reduce.w", &[mid, channels, 1, 1], 0.02),
            reduce_b: b.zeros("reduce.b", &[mid, 1, 1]),
            m_w: b.trunc_normal("m.w", &[channels, mid, 1, 1], 0.02),
            m_b: b.zeros("m.b", &[channels, 1, 1]),
            n_w: b.trunc_normal("n.w", &[channels, mid, 1, 1], 0.02),
            n_b: b.zeros("n.b", &[channels, 1, 1]),
            channels,
            use_diff,
        })
    }

    /// Per-channel branch logits M and N, each `[b, c, 1, 1]`.
    fn logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        diff: Var,
        sum: Var,
    ) -> Result<(Var, Var)> {
        let gap = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let m = tape.mean_axis(v, 3)?;
            tape.mean_axis(m, 2)
        };
        let gap_sum = gap(tape, sum)?;
        let pooled = if self.use_diff {
            let gap_diff = gap(tape, diff)?;
            tape.mul(gap_diff, gap_sum)?
        } else {
            gap_sum
        };
        let z = tape.conv2d_valid(pooled, bind.var(self.reduce_w), 1, 1)?;
        let z = tape.add(z, bind.var(self.reduce_b))?;
        let z = tape.relu(z);
        let m = tape.conv2d_valid(z, bind.var(self.m_w), 1, 1)?;
        let m = tape.add(m, bind.var(self.m_b))?;
        let n = tape.conv2d_valid(z, bind.var(self.n_w), 1, 1)?;
        let n = tape.add(n, bind.var(self.n_b))?;
        Ok((m, n))
    }

    /// Two-way softmax weights (Ms, Ns), each `[b, c, 1, 1]`, summing to one
    /// per channel. Computed as sigmoid(M - N) / sigmoid(N - M).
    pub fn fusion_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        f1: Var,
        f2: Var,
    ) -> Result<(Var, Var)> {
        let diff = tape.sub(f1, f2)?;
        let sum = tape.add(f1, f2)?;
        let (m, n) = self.logits(tape, bind, diff, sum)?;
        let mn = tape.sub(m, n)?;
        let nm = tape.sub(n, m)?;
        Ok((tape.sigmoid(mn), tape.sigmoid(nm)))
    }

    /// Convex per-channel combination of the two branch features.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        f1: Var,
        f2: Var,
    ) -> Result<Var> {
        let s1 = tape.shape(f1).to_vec();
        let s2 = tape.shape(f2).to_vec();
        if s1 != s2 || s1.len() != 4 || s1[1] != self.channels {
            return Err(Error::dim("dfa inputs", &s1, &s2));
        }
        let diff = tape.sub(f1, f2)?;
        let sum = tape.add(f1, f2)?;
        let (m, n) = self.logits(tape, bind, diff, sum)?;
        let mn = tape.sub(m, n)?;
        let ms = tape.sigmoid(mn);

        let mid = tape.scale(sum, 0.5);
        let half = tape.constant(Tensor::full(&[1], T::from_f64(0.5)));
        let dev = tape.sub(ms, half)?;
        let weighted = tape.mul(dev, diff)?;
        tape.add(mid, weighted)
    }
}
