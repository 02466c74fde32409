//! Central-difference gradient checking against the tape.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of checking one differentiable function.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Max over all checked coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Same measure restricted to each input.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

fn eval(name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract("grad_check", format!("{name} must return a scalar")));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: format!("output of {name} under gradient check"),
        });
    }
    Ok(v)
}

/// Checks the tape gradient of a scalar function of several inputs.
///
/// At most `max_coords` evenly spaced coordinates of each input are perturbed.
pub fn grad_check_report<F>(
    name: &str,
    inputs: &[Tensor],
    eps: f64,
    max_coords: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite {
            what: format!("output of {name} under gradient check"),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(tape);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = if n <= max_coords { 1 } else { n.div_ceil(max_coords) };
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(name, &work, &f)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(name, &work, &f)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
            coords_checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
        coords_checked,
    })
}

/// Max relative error between the tape gradient of `f` at `theta` and its
/// central difference with step `eps`.
pub fn grad_check<F>(name: &str, theta: &Tensor, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_report(name, std::slice::from_ref(theta), eps, usize::MAX, |t, v| f(t, v[0]))
        .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{square, sum};

    #[test]
    fn quadratic_has_exact_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check("sum_sq", &x, 1e-5, |t, v| {
            let s = square(t, v);
            Ok(sum(t, s))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check("log_of_zero", &x, 1e-5, |t, v| {
            let val = t.value(v).map(|x| x.ln());
            Ok(t.constant(val))
        })
        .unwrap_err();
        assert!(err.to_string().contains("log_of_zero"), "{err}");
    }
}
