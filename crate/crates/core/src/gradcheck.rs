//! Central finite-difference verification of backward rules.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Per-input maximum, aligned with the `inputs` argument.
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with step `eps` at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, |_, _| true)
}

/// Like [`grad_check`] but only probes coordinates `(input, flat index)`
/// accepted by `select`.
pub fn grad_check_with<F, S>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    mut select: S,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    S: FnMut(usize, usize) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut probe = inputs.to_vec();
    let mut per_input = vec![0.0f64; inputs.len()];
    let mut coordinates = 0;
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .ok_or_else(|| Error::Contract(format!("no gradient for input {i}")))?
            .clone();
        for j in 0..inputs[i].numel() {
            if !select(i, j) {
                continue;
            }
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[j], numeric);
            per_input[i] = per_input[i].max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        coordinates,
    })
}
