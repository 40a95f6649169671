//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it never shares a code
//! path with the backward rules it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst relative error over all checked inputs.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// with respect to every tensor in `inputs`.
///
/// The relative error of one input is `|a - n|_2 / max(|a|_2, |n|_2, 1e-6)`.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(analytic.data()).max(norm(&numeric)).max(1e-6);
        per_input.push(norm(&diff) / scale);
    }
    Ok(GradCheck {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}
