//! Rectangle windows and the dynamic relative position bias.
//!
//! Attention splits its heads between horizontal windows (wide, rh < rw) and
//! vertical windows (tall, rh > rw); the first half of the heads uses the
//! horizontal spec, the second half the vertical one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
    Square,
}

/// A rectangle window of rh x rw pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub rh: usize,
    pub rw: usize,
}

impl WindowSpec {
    pub fn new(rh: usize, rw: usize) -> Result<Self> {
        if rh == 0 || rw == 0 {
            return Err(Error::Config(format!("window extents must be >= 1, got {rh}x{rw}")));
        }
        Ok(WindowSpec { rh, rw })
    }

    pub fn orientation(&self) -> Orientation {
        match self.rh.cmp(&self.rw) {
            std::cmp::Ordering::Less => Orientation::Horizontal,
            std::cmp::Ordering::Greater => Orientation::Vertical,
            std::cmp::Ordering::Equal => Orientation::Square,
        }
    }

    pub fn tokens(&self) -> usize {
        self.rh * self.rw
    }
}

/// Even split of attention heads: the first half attends in horizontal
/// windows, the second half in vertical windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSplit {
    total: usize,
}

impl HeadSplit {
    pub fn new(total: usize) -> Result<Self> {
        if total == 0 || total % 2 != 0 {
            return Err(Error::Config(format!(
                "head count must be even and positive, got {total}"
            )));
        }
        Ok(HeadSplit { total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Orientation assigned to head `n` (0-based); horizontal heads come first.
    pub fn orientation_of(&self, head: usize) -> Orientation {
        debug_assert!(head < self.total);
        if head < self.total / 2 {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        }
    }
}

/// Splits `[b, c, h, w]` into `[b * nw, rh * rw, c]` windows.
pub fn partition<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: WindowSpec) -> Result<Var> {
    tape.partition(x, spec.rh, spec.rw)
}

/// Inverse of [`partition`] given the original spatial extents.
pub fn merge<T: Scalar>(
    tape: &mut Tape<T>,
    windows: Var,
    spec: WindowSpec,
    h: usize,
    w: usize,
) -> Result<Var> {
    tape.merge_windows(windows, spec.rh, spec.rw, h, w)
}

/// Continuous-position bias MLP: (dy/rh, dx/rw) -> one bias per head,
/// shared across windows. One hidden layer of width `hidden`.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub heads: usize,
}

impl RelPosBias {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, hidden: usize, heads: usize) -> Self {
        RelPosBias {
            w1: b.trunc_normal("w1", &[2, hidden], 0.02),
            b1: b.zeros("b1", &[hidden]),
            w2: b.trunc_normal("w2", &[hidden, heads], 0.02),
            b2: b.zeros("b2", &[heads]),
            heads,
        }
    }

    /// Bias table `[heads, tokens, tokens]` for one window spec.
    pub fn bias<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        spec: WindowSpec,
    ) -> Result<Var> {
        let t = spec.tokens();
        let table = tape.constant(offset_table(spec));
        let h = tape.matmul(table, bind.var(self.w1))?;
        let h = tape.add(h, bind.var(self.b1))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, bind.var(self.w2))?;
        let o = tape.add(o, bind.var(self.b2))?;
        let o = tape.reshape(o, &[t, t, self.heads])?;
        tape.permute(o, &[2, 0, 1])
    }
}

/// Normalized relative offsets between all token pairs of a window,
/// shaped `[tokens * tokens, 2]` with entries (dy/rh, dx/rw).
pub fn offset_table<T: Scalar>(spec: WindowSpec) -> Tensor<T> {
    let t = spec.tokens();
    let mut data = Vec::with_capacity(t * t * 2);
    for i in 0..t {
        let (yi, xi) = ((i / spec.rw) as f64, (i % spec.rw) as f64);
        for j in 0..t {
            let (yj, xj) = ((j / spec.rw) as f64, (j % spec.rw) as f64);
            data.push(T::from_f64((yi - yj) / spec.rh as f64));
            data.push(T::from_f64((xi - xj) / spec.rw as f64));
        }
    }
    Tensor::new(&[t * t, 2], data).expect("consistent extents")
}
