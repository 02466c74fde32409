//! Convolutions and per-site linear maps.
//!
//! `conv2d` uses the cross-correlation convention (no kernel flip) and lowers
//! each image to an im2col matrix so the heavy lifting is one GEMM per image.

use super::linalg::gemm;
use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::par;

/// Output extent of a convolution along one axis, `None` if the padded input
/// is smaller than the kernel.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (stride > 0 && n + 2 * pad >= k).then(|| (n + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// `[C·kh·kw, Ho·Wo]` patch matrix of one image.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let l = self.l();
        let mut cols = vec![0.0; self.k() * l];
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let l = self.l();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * l;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<ConvGeom> {
    ensure!(x.ndim() == 4, "conv2d", "input must be NCHW, got {:?}", x.shape());
    ensure!(w.ndim() == 4, "conv2d", "weight must be [Co,C,kh,kw], got {:?}", w.shape());
    let (c, h, wd) = (x.dim(1), x.dim(2), x.dim(3));
    let (co, cw, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    ensure!(c == cw, "conv2d", "input has {c} channels but weight expects {cw}");
    ensure!(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel {kh}x{kw} must be odd");
    ensure!(stride >= 1, "conv2d", "stride must be positive");
    if let Some(b) = bias {
        ensure!(b.shape() == [co], "conv2d", "bias shape {:?} != [{co}]", b.shape());
    }
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(wd, kw, stride, pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(crate::Error::contract(
            "conv2d",
            format!("input {h}x{wd} with padding {pad} is smaller than kernel {kh}x{kw}"),
        ));
    };
    Ok(ConvGeom { c, h, w: wd, co, kh, kw, stride, pad, ho, wo })
}

/// Plain forward convolution of `x: [N,C,H,W]` with `w: [Co,C,kh,kw]`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom(x, w, bias, stride, pad)?;
    let n = x.dim(0);
    let (k, l) = (g.k(), g.l());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; n * g.co * l];
    par::for_each_chunk(&mut out, g.co * l, |i, o| {
        let img = &x.data()[i * in_len..(i + 1) * in_len];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            img
        } else {
            owned = g.im2col(img);
            &owned
        };
        if let Some(b) = bias {
            for (row, bv) in o.chunks_mut(l).zip(b.data()) {
                row.fill(*bv);
            }
        }
        gemm(g.co, k, l, w.data(), (k, 1), cols, (l, 1), 1.0, o, (l, 1));
    });
    Ok(Tensor::from_parts(vec![n, g.co, g.ho, g.wo], out))
}

/// Recorded 2D convolution with optional bias.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let g = conv_geom(
        tape.value(x),
        tape.value(w),
        bias.map(|b| tape.value(b)),
        stride,
        pad,
    )?;
    let out = conv2d_forward(
        tape.value(x),
        tape.value(w),
        bias.map(|b| tape.value(b)),
        stride,
        pad,
    )?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(tape.push_fn("conv2d", out, &parents, move |p, _, grad, needs| {
        let (xt, wt) = (p[0], p[1]);
        let n = xt.dim(0);
        let (k, l) = (g.k(), g.l());
        let in_len = g.c * g.h * g.w;
        let out_len = g.co * l;
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; xt.len()];
            par::for_each_chunk(&mut gx, in_len, |i, gxi| {
                let go = &grad[i * out_len..(i + 1) * out_len];
                if g.is_pointwise() {
                    gemm(g.c, g.co, l, wt.data(), (1, k), go, (l, 1), 1.0, gxi, (l, 1));
                } else {
                    let mut gcols = vec![0.0; k * l];
                    gemm(k, g.co, l, wt.data(), (1, k), go, (l, 1), 0.0, &mut gcols, (l, 1));
                    g.col2im(&gcols, gxi);
                }
            });
            gx
        });
        let gw = needs[1].then(|| {
            let parts = par::map(n, |i| {
                let img = &xt.data()[i * in_len..(i + 1) * in_len];
                let go = &grad[i * out_len..(i + 1) * out_len];
                let owned;
                let cols: &[f64] = if g.is_pointwise() {
                    img
                } else {
                    owned = g.im2col(img);
                    &owned
                };
                let mut gw = vec![0.0; g.co * k];
                gemm(g.co, l, k, go, (l, 1), cols, (1, l), 0.0, &mut gw, (k, 1));
                gw
            });
            par::sum_partials(parts, g.co * k)
        });
        let mut res = vec![gx, gw];
        if p.len() == 3 {
            res.push(needs[2].then(|| {
                let mut gb = vec![0.0; g.co];
                for (i, row) in grad.chunks(l).enumerate() {
                    gb[i % g.co] += row.iter().sum::<f64>();
                }
                gb
            }));
        }
        res
    }))
}

fn linear_geom(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize)> {
    ensure!(x.ndim() >= 2, "linear_channels", "input needs [N,C,...], got {:?}", x.shape());
    ensure!(w.ndim() == 2, "linear_channels", "weight must be [Co,C], got {:?}", w.shape());
    let (n, c) = (x.dim(0), x.dim(1));
    let l: usize = x.shape()[2..].iter().product();
    let co = w.dim(0);
    ensure!(
        w.dim(1) == c,
        "linear_channels",
        "input has {c} channels but weight expects {}",
        w.dim(1)
    );
    if let Some(b) = bias {
        ensure!(b.shape() == [co], "linear_channels", "bias shape {:?} != [{co}]", b.shape());
    }
    Ok((n, c, co, l))
}

/// Applies `w: [Co, C]` to the channel vector of every site of `x: [N, C, ...]`.
pub fn linear_channels_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, co, l) = linear_geom(x, w, bias)?;
    let mut out = vec![0.0; n * co * l];
    par::for_each_chunk(&mut out, co * l, |i, o| {
        if let Some(b) = bias {
            for (row, bv) in o.chunks_mut(l).zip(b.data()) {
                row.fill(*bv);
            }
        }
        let xi = &x.data()[i * c * l..(i + 1) * c * l];
        gemm(co, c, l, w.data(), (c, 1), xi, (l, 1), 1.0, o, (l, 1));
    });
    let mut shape = x.shape().to_vec();
    shape[1] = co;
    Ok(Tensor::from_parts(shape, out))
}

pub fn linear_channels(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let (_, c, co, l) = linear_geom(tape.value(x), tape.value(w), bias.map(|b| tape.value(b)))?;
    let out = linear_channels_forward(tape.value(x), tape.value(w), bias.map(|b| tape.value(b)))?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(tape.push_fn("linear", out, &parents, move |p, _, grad, needs| {
        let (xt, wt) = (p[0], p[1]);
        let n = xt.dim(0);
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; xt.len()];
            par::for_each_chunk(&mut gx, c * l, |i, gxi| {
                let go = &grad[i * co * l..(i + 1) * co * l];
                gemm(c, co, l, wt.data(), (1, c), go, (l, 1), 0.0, gxi, (l, 1));
            });
            gx
        });
        let gw = needs[1].then(|| {
            let parts = par::map(n, |i| {
                let xi = &xt.data()[i * c * l..(i + 1) * c * l];
                let go = &grad[i * co * l..(i + 1) * co * l];
                let mut gw = vec![0.0; co * c];
                gemm(co, l, c, go, (l, 1), xi, (1, l), 0.0, &mut gw, (c, 1));
                gw
            });
            par::sum_partials(parts, co * c)
        });
        let mut res = vec![gx, gw];
        if p.len() == 3 {
            res.push(needs[2].then(|| {
                let mut gb = vec![0.0; co];
                for (i, row) in grad.chunks(l).enumerate() {
                    gb[i % co] += row.iter().sum::<f64>();
                }
                gb
            }));
        }
        res
    }))
}

fn dw_geom(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    ensure!(x.ndim() >= 3, "depthwise_causal_conv1d", "input needs [N,C,...], got {:?}", x.shape());
    let (n, c) = (x.dim(0), x.dim(1));
    let l: usize = x.shape()[2..].iter().product();
    ensure!(
        w.ndim() == 2 && w.dim(0) == c && b.shape() == [c],
        "depthwise_causal_conv1d",
        "weight {:?} / bias {:?} do not match {c} channels",
        w.shape(),
        b.shape()
    );
    Ok((n, c, l, w.dim(1)))
}

/// Causal depthwise convolution along the flattened trailing (sweep) axis:
/// `y[c,t] = b[c] + Σ_j w[c,j]·x[c, t-(k-1)+j]`, zero before the start.
pub fn depthwise_causal_conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, l, k) = dw_geom(x, w, b)?;
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, l, |row, o| {
        let ch = row % c;
        let xs = &x.data()[row * l..(row + 1) * l];
        let ws = &w.data()[ch * k..(ch + 1) * k];
        for (t, ov) in o.iter_mut().enumerate() {
            let mut acc = b.data()[ch];
            for (j, wv) in ws.iter().enumerate() {
                if let Some(src) = (t + j).checked_sub(k - 1) {
                    acc += wv * xs[src];
                }
            }
            *ov = acc;
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn depthwise_causal_conv1d(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, c, l, k) = dw_geom(tape.value(x), tape.value(w), tape.value(b))?;
    let out = depthwise_causal_conv1d_forward(tape.value(x), tape.value(w), tape.value(b))?;
    Ok(tape.push_fn("depthwise_causal_conv1d", out, &[x, w, b], move |p, _, grad, needs| {
        let (xt, wt) = (p[0], p[1]);
        let rows = xt.len() / l;
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; xt.len()];
            par::for_each_chunk(&mut gx, l, |row, gxr| {
                let ch = row % c;
                let go = &grad[row * l..(row + 1) * l];
                let ws = &wt.data()[ch * k..(ch + 1) * k];
                for (t, gv) in go.iter().enumerate() {
                    for (j, wv) in ws.iter().enumerate() {
                        if let Some(src) = (t + j).checked_sub(k - 1) {
                            gxr[src] += gv * wv;
                        }
                    }
                }
            });
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; c * k];
            for row in 0..rows {
                let ch = row % c;
                let go = &grad[row * l..(row + 1) * l];
                let xs = &xt.data()[row * l..(row + 1) * l];
                for (t, gv) in go.iter().enumerate() {
                    for j in 0..k {
                        if let Some(src) = (t + j).checked_sub(k - 1) {
                            gw[ch * k + j] += gv * xs[src];
                        }
                    }
                }
            }
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; c];
            for (row, go) in grad.chunks(l).enumerate() {
                gb[row % c] += go.iter().sum::<f64>();
            }
            gb
        });
        vec![gx, gw, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[b, ci, iy as usize, ix as usize]) * w.at(&[o, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_center_is_nine() {
        let out = conv2d_forward(&Tensor::ones(&[1, 1, 4, 4]), &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let out = conv2d_forward(&Tensor::zeros(&[1, 3, 256, 256]), &Tensor::zeros(&[2, 3, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 2, 128, 128]);
    }

    #[test]
    fn matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_and_small_input_are_rejected() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[1, 1, 1, 1]), &Tensor::zeros(&[1, 1, 3, 3]), None, 1, 0).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1, 1).is_err());
    }

    #[test]
    fn causal_conv_ignores_the_future() {
        let x = Tensor::new(&[1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::new(&[1, 3], vec![0.5, 0.25, 1.0]).unwrap();
        let y = depthwise_causal_conv1d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.25, 4.0, 5.75, 7.5]);
    }
}
