//! Central finite-difference check of tape gradients.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error between the backward pass and central differences
/// of `output` over every element of the leaves in `wrt`.
pub fn max_relative_error(tape: &mut Tape, output: Var, wrt: &[Var], step: f64) -> Result<f64> {
    let grads = tape.backward(output)?;
    let leaves = tape.leaves();
    let base: Vec<Tensor> = leaves.iter().map(|&l| tape.value(l).clone()).collect();
    let mut worst: f64 = 0.0;
    for &v in wrt {
        let pos = leaves
            .iter()
            .position(|&l| l == v)
            .ok_or_else(|| Error::shape("gradcheck", format!("node {} is not a leaf", v.index())))?;
        let analytic = grads.get(v);
        for (k, &a) in analytic.iter().enumerate() {
            let mut inputs = base.clone();
            inputs[pos].data_mut()[k] += step;
            tape.evaluate(&inputs)?;
            let fp = tape.value(output).item();
            inputs[pos].data_mut()[k] -= 2.0 * step;
            tape.evaluate(&inputs)?;
            let fm = tape.value(output).item();
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * step)));
        }
    }
    tape.evaluate(&base)?;
    Ok(worst)
}
