//! Central-difference verification of reverse-mode gradients.
//!
//! Always runs in f64: the comparison threshold (1e-4) sits far above f64
//! roundoff but well below any real backward bug.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves bound in the given order.
pub trait LossFn: Sync {
    fn eval(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    fn eval(&self, tape: &mut Tape<f64>, inputs: &[Var]) -> Result<Var> {
        self(tape, inputs)
    }
}

/// Compares the taped gradient of `f` at `point` against central differences
/// with the given `step`, returning the worst relative error
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over all coordinates.
pub fn grad_check(f: &dyn LossFn, point: &[Tensor<f64>], step: f64) -> Result<f64> {
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    check_finite(tape.value(loss).data(), "forward value")?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; point[i].numel()])
        })
        .collect();

    let eval_at = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f.eval(&mut t, &vs)?;
        let v = t.value(l).data()[0];
        Ok(v)
    };

    // one job per coordinate; each evaluates f twice
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(pi, t)| (0..t.numel()).map(move |ci| (pi, ci)))
        .collect();
    let errors: Vec<Result<f64>> = coords
        .par_iter()
        .map(|&(pi, ci)| {
            let mut plus = point.to_vec();
            plus[pi].data_mut()[ci] += step;
            let fp = eval_at(&plus)?;
            let mut minus = point.to_vec();
            minus[pi].data_mut()[ci] -= step;
            let fm = eval_at(&minus)?;
            let fd = (fp - fm) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite difference of input {pi}"),
                    index: ci,
                });
            }
            let ad = analytic[pi][ci];
            Ok((ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs()))
        })
        .collect();

    let mut worst = 0.0_f64;
    for e in errors {
        worst = worst.max(e?);
    }
    Ok(worst)
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if let Some(ix) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: context.into(),
            index: ix,
        });
    }
    Ok(())
}
