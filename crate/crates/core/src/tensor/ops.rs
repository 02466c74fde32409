use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    ensure!(sa == sb, op, "shape mismatch {sa:?} vs {sb:?}");
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let out = zip_map(tape.value(a), tape.value(b), |x, y| x + y);
    Ok(tape.push_fn("add", out, &[a, b], |_, _, g, needs| {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }))
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mul", a, b)?;
    let out = zip_map(tape.value(a), tape.value(b), |x, y| x * y);
    Ok(tape.push_fn("mul", out, &[a, b], |p, _, g, needs| {
        let ga = needs[0].then(|| g.iter().zip(p[1].data()).map(|(g, y)| g * y).collect());
        let gb = needs[1].then(|| g.iter().zip(p[0].data()).map(|(g, x)| g * x).collect());
        vec![ga, gb]
    }))
}

pub fn scale(tape: &mut Tape, a: Var, s: f64) -> Var {
    let out = tape.value(a).map(|x| x * s);
    tape.push_fn("scale", out, &[a], move |_, _, g, _| {
        vec![Some(g.iter().map(|g| g * s).collect())]
    })
}

pub fn square(tape: &mut Tape, a: Var) -> Var {
    let out = tape.value(a).map(|x| x * x);
    tape.push_fn("square", out, &[a], |p, _, g, _| {
        vec![Some(g.iter().zip(p[0].data()).map(|(g, x)| 2.0 * g * x).collect())]
    })
}

pub fn reshape(tape: &mut Tape, a: Var, shape: &[usize]) -> Result<Var> {
    let out = tape.value(a).reshape(shape)?;
    Ok(tape.push_fn("reshape", out, &[a], |_, _, g, _| vec![Some(g.to_vec())]))
}

pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let out = Tensor::scalar(tape.value(a).data().iter().sum());
    tape.push_fn("sum", out, &[a], |p, _, g, _| vec![Some(vec![g[0]; p[0].len()])])
}

pub fn mean(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).len().max(1) as f64;
    let s = sum(tape, a);
    scale(tape, s, 1.0 / n)
}

fn unary(
    tape: &mut Tape,
    name: &'static str,
    a: Var,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
) -> Var {
    let out = tape.value(a).map(f);
    tape.push_fn(name, out, &[a], move |p, _, g, _| {
        vec![Some(g.iter().zip(p[0].data()).map(|(g, &x)| g * df(x)).collect())]
    })
}

pub fn exp(tape: &mut Tape, a: Var) -> Var {
    let out = tape.value(a).map(f64::exp);
    tape.push_fn("exp", out, &[a], |_, out, g, _| {
        vec![Some(g.iter().zip(out.data()).map(|(g, e)| g * e).collect())]
    })
}

pub fn relu(tape: &mut Tape, a: Var) -> Var {
    unary(tape, "relu", a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU.
pub fn gelu(tape: &mut Tape, a: Var) -> Var {
    unary(tape, "gelu", a, gelu_scalar, gelu_grad)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(tape: &mut Tape, a: Var) -> Var {
    unary(tape, "silu", a, silu_scalar, silu_grad)
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(tape: &mut Tape, a: Var) -> Var {
    unary(tape, "softplus", a, softplus_scalar, sigmoid)
}

/// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
pub fn global_avg_pool(tape: &mut Tape, a: Var) -> Result<Var> {
    let x = tape.value(a);
    ensure!(x.ndim() == 4, "global_avg_pool", "expected NCHW, got {:?}", x.shape());
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    let out = Tensor::from_parts(vec![n, c, 1, 1], data);
    Ok(tape.push_fn("global_avg_pool", out, &[a], move |_, _, g, _| {
        let mut gx = Vec::with_capacity(n * c * hw);
        for &gv in g {
            gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
        }
        vec![Some(gx)]
    }))
}

/// Mean over the leading `N·J` maps of `-Σ target·log softmax(logits)`,
/// where each `[H, W]` map of `target` is a probability distribution.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let x = tape.value(logits);
    ensure!(
        x.ndim() == 4 && x.shape() == target.shape(),
        "softmax_cross_entropy",
        "logits {:?} and target {:?} must be matching NJHW tensors",
        x.shape(),
        target.shape()
    );
    let maps = x.dim(0) * x.dim(1);
    let hw = x.dim(2) * x.dim(3);
    let mut probs = vec![0.0; x.len()];
    let mut loss = 0.0;
    for m in 0..maps {
        let l = &x.data()[m * hw..(m + 1) * hw];
        let t = &target.data()[m * hw..(m + 1) * hw];
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        let log_z = mx + z.ln();
        for i in 0..hw {
            probs[m * hw + i] = (l[i] - log_z).exp();
            loss -= t[i] * (l[i] - log_z);
        }
    }
    let inv = 1.0 / maps as f64;
    let target = target.data().to_vec();
    let out = Tensor::scalar(loss * inv);
    Ok(tape.push_fn("softmax_cross_entropy", out, &[logits], move |_, _, g, _| {
        let s = g[0] * inv;
        vec![Some(probs.iter().zip(&target).map(|(p, t)| s * (p - t)).collect())]
    }))
}

/// Mean absolute error against a constant target.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let x = tape.value(pred);
    ensure!(
        x.len() == target.len(),
        "l1_loss",
        "prediction has {} values, target {}",
        x.len(),
        target.len()
    );
    let n = x.len().max(1) as f64;
    let diff: Vec<f64> = x.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
    let out = Tensor::scalar(diff.iter().map(|d| d.abs()).sum::<f64>() / n);
    Ok(tape.push_fn("l1_loss", out, &[pred], move |_, _, g, _| {
        vec![Some(diff.iter().map(|d| g[0] * d.signum() * (*d != 0.0) as u8 as f64 / n).collect())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = square(&mut tape, x);
        let s = sum(&mut tape, sq);
        assert_eq!(tape.value(s).item(), 5.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus_scalar(-800.0) >= 0.0 && softplus_scalar(800.0) == 800.0);
    }

    #[test]
    fn cross_entropy_of_matching_distribution_is_entropy() {
        let t = Tensor::new(&[1, 1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let logits = tape.leaf(t.map(f64::ln), true);
        let l = softmax_cross_entropy(&mut tape, logits, &t).unwrap();
        let h: f64 = -t.data().iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((tape.value(l).item() - h).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(logits).unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]), true);
        let b = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(add(&mut tape, a, b).is_err());
    }
}
