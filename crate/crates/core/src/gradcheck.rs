//! Central finite-difference gradient checking in 64-bit.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Per-element relative error: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and the input vars (all tracked) and must return
/// a scalar. Returns the maximum relative error over every input element.
pub fn max_gradient_error<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let numeric = numeric_partial(inputs, which, j, &f)?;
            worst = worst.max(relative_error(analytic[which][j], numeric));
        }
    }
    Ok(worst)
}

pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect())
}

pub fn numeric_partial<F>(inputs: &[Tensor<f64>], which: usize, j: usize, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        shifted[which].data_mut()[j] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.into_iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    Ok((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP))
}
