use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::par;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis at every site of `[N, C, ...]`.
pub fn layer_norm_channels(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let xt = tape.value(x);
    ensure!(xt.ndim() >= 2, "layer_norm", "input needs [N,C,...], got {:?}", xt.shape());
    let (n, c) = (xt.dim(0), xt.dim(1));
    let l: usize = xt.shape()[2..].iter().product();
    ensure!(
        tape.value(gamma).shape() == [c] && tape.value(beta).shape() == [c],
        "layer_norm",
        "scale/shift must have shape [{c}]"
    );
    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut xhat = vec![0.0; xt.len()];
    let mut inv_std = vec![0.0; n * l];
    for i in 0..n {
        let base = i * c * l;
        for s in 0..l {
            let mu = (0..c).map(|ch| xt.data()[base + ch * l + s]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (xt.data()[base + ch * l + s] - mu).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i * l + s] = is;
            for ch in 0..c {
                let o = base + ch * l + s;
                xhat[o] = (xt.data()[o] - mu) * is;
            }
        }
    }
    let mut out = vec![0.0; xt.len()];
    for (o, (xh, idx)) in out.iter_mut().zip(xhat.iter().zip(0..)) {
        let ch = (idx / l) % c;
        *o = g[ch] * xh + b[ch];
    }
    let out = Tensor::from_parts(xt.shape().to_vec(), out);
    Ok(tape.push_fn("layer_norm", out, &[x, gamma, beta], move |p, _, grad, needs| {
        let gm = p[1].data();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; grad.len()];
            par::for_each_chunk(&mut gx, c * l, |i, gxi| {
                let base = i * c * l;
                for s in 0..l {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ch in 0..c {
                        let o = base + ch * l + s;
                        let gh = grad[o] * gm[ch];
                        m1 += gh;
                        m2 += gh * xhat[o];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let is = inv_std[i * l + s];
                    for ch in 0..c {
                        let o = base + ch * l + s;
                        gxi[ch * l + s] = is * (grad[o] * gm[ch] - m1 - xhat[o] * m2);
                    }
                }
            });
            gx
        });
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        if needs[1] || needs[2] {
            for (idx, (gv, xh)) in grad.iter().zip(&xhat).enumerate() {
                let ch = (idx / l) % c;
                gg[ch] += gv * xh;
                gb[ch] += gv;
            }
        }
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    }))
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// 2D batch normalization of `[N, C, H, W]`.
///
/// In training mode also returns the batch mean and unbiased variance so the
/// caller can update its running statistics.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BatchNormMode<'_>,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
    let xt = tape.value(x);
    ensure!(xt.ndim() == 4, "batch_norm", "input must be NCHW, got {:?}", xt.shape());
    let (n, c, hw) = (xt.dim(0), xt.dim(1), xt.dim(2) * xt.dim(3));
    ensure!(
        tape.value(gamma).shape() == [c] && tape.value(beta).shape() == [c],
        "batch_norm",
        "scale/shift must have shape [{c}]"
    );
    let m = (n * hw) as f64;
    let plane = |i: usize, ch: usize| &xt.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
    let (mean, var, batch_stats) = match mode {
        BatchNormMode::Train => {
            let mean: Vec<f64> = (0..c)
                .map(|ch| (0..n).map(|i| plane(i, ch).iter().sum::<f64>()).sum::<f64>() / m)
                .collect();
            let var: Vec<f64> = (0..c)
                .map(|ch| {
                    (0..n)
                        .map(|i| plane(i, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                        .sum::<f64>()
                        / m
                })
                .collect();
            let unbiased = var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
        BatchNormMode::Eval { mean, var } => {
            ensure!(
                mean.len() == c && var.len() == c,
                "batch_norm",
                "running statistics must have {c} entries"
            );
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let mut xhat = vec![0.0; xt.len()];
    let mut out = vec![0.0; xt.len()];
    for (idx, v) in xt.data().iter().enumerate() {
        let ch = (idx / hw) % c;
        xhat[idx] = (v - mean[ch]) * inv_std[ch];
        out[idx] = g[ch] * xhat[idx] + b[ch];
    }
    let out = Tensor::from_parts(xt.shape().to_vec(), out);
    let train = batch_stats.is_some();
    let var_out = tape.push_fn("batch_norm", out, &[x, gamma, beta], move |p, _, grad, needs| {
        let gm = p[1].data();
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for (idx, (gv, xh)) in grad.iter().zip(&xhat).enumerate() {
            let ch = (idx / hw) % c;
            gg[ch] += gv * xh;
            gb[ch] += gv;
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; grad.len()];
            for (idx, gxv) in gx.iter_mut().enumerate() {
                let ch = (idx / hw) % c;
                let gh = grad[idx] * gm[ch];
                *gxv = if train {
                    // mean over the channel's batch of gh and gh·xhat
                    let m1 = gb[ch] * gm[ch] / m;
                    let m2 = gg[ch] * gm[ch] / m;
                    inv_std[ch] * (gh - m1 - xhat[idx] * m2)
                } else {
                    inv_std[ch] * gh
                };
            }
            gx
        });
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    });
    Ok((var_out, batch_stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 3], |i| (i * i) as f64), false);
        let g = tape.leaf(Tensor::ones(&[4]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = layer_norm_channels(&mut tape, x, g, b).unwrap();
        let y = tape.value(y);
        for s in 0..3 {
            let col: Vec<f64> = (0..4).map(|c| y.at(&[0, c, s])).collect();
            let mu: f64 = col.iter().sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_batch_norm_gives_shift() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2, 2]), false);
        let g = tape.leaf(Tensor::ones(&[3]), false);
        let b = tape.leaf(Tensor::full(&[3], 0.25), false);
        let (y, stats) = batch_norm(&mut tape, x, g, b, BatchNormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.unwrap().0, vec![0.0; 3]);
    }
}
