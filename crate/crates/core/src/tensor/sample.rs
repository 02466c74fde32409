//! Bilinear sampling with zero padding, and bilinear resizing.
//!
//! Points are `(x, y)` in 0-based grid coordinates: `(i, j)` lands exactly on
//! column `i`, row `j`. Grid cells outside the map read as zero.

use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// One in-bounds corner of a bilinear stencil: flat plane index, interpolation
/// weight, and the weight's derivatives with respect to the sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub idx: usize,
    pub weight: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Stencil of the (up to) four in-bounds neighbours of `(px, py)` on an
/// `h × w` plane.
pub(crate) fn bilinear_taps(px: f64, py: f64, h: usize, w: usize) -> impl Iterator<Item = Tap> {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let corners = [
        (0isize, 0isize, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1, 1, fx * fy, fy, fx),
    ];
    // Far-away points saturate instead of overflowing the index arithmetic.
    let (x0, y0) = if x0.is_finite() && y0.is_finite() && x0.abs() < 1e15 && y0.abs() < 1e15 {
        (x0 as isize, y0 as isize)
    } else {
        (isize::MIN / 2, isize::MIN / 2)
    };
    corners.into_iter().filter_map(move |(ox, oy, weight, dx, dy)| {
        let (x, y) = (x0 + ox, y0 + oy);
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| Tap {
            idx: y as usize * w + x as usize,
            weight,
            dx,
            dy,
        })
    })
}

fn check_map(map: &Tensor) -> Result<(usize, usize, usize)> {
    ensure!(map.ndim() == 3, "bilinear_sample", "map must be [C,H,W], got {:?}", map.shape());
    Ok((map.dim(0), map.dim(1), map.dim(2)))
}

/// Samples every channel of `map: [C, H, W]` at the real point `(x, y)`.
pub fn bilinear_sample(map: &Tensor, point: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = check_map(map)?;
    let mut out = vec![0.0; c];
    for tap in bilinear_taps(point.0, point.1, h, w) {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += tap.weight * map.data()[ch * h * w + tap.idx];
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

/// Partial derivatives of [`bilinear_sample`] with respect to `x` and `y`,
/// each of shape `[C]`. Uses the right-sided derivative at grid lines.
pub fn bilinear_sample_grad(map: &Tensor, point: (f64, f64)) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_map(map)?;
    let mut gx = vec![0.0; c];
    let mut gy = vec![0.0; c];
    for tap in bilinear_taps(point.0, point.1, h, w) {
        for ch in 0..c {
            let v = map.data()[ch * h * w + tap.idx];
            gx[ch] += tap.dx * v;
            gy[ch] += tap.dy * v;
        }
    }
    Ok((Tensor::from_parts(vec![c], gx), Tensor::from_parts(vec![c], gy)))
}

/// Source taps `(i0, i1, frac)` of a half-pixel-centred linear resize.
fn resize_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[N, C, h, w]` to `[N, C, out_h, out_w]`
/// (half-pixel centres, edge clamping).
pub fn resize_bilinear(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let xt = tape.value(x);
    ensure!(xt.ndim() == 4, "resize_bilinear", "input must be NCHW, got {:?}", xt.shape());
    ensure!(out_h > 0 && out_w > 0, "resize_bilinear", "empty output size");
    let (n, c, h, w) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
    if (h, w) == (out_h, out_w) {
        let out = xt.clone();
        return Ok(tape.push_fn("resize_bilinear", out, &[x], |_, _, g, _| vec![Some(g.to_vec())]));
    }
    let ry = resize_axis(h, out_h);
    let rx = resize_axis(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (plane, o) in xt.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                o[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, out_h, out_w], out);
    Ok(tape.push_fn("resize_bilinear", out, &[x], move |_, _, grad, _| {
        let mut gx = vec![0.0; n * c * h * w];
        for (gp, go) in gx.chunks_mut(h * w).zip(grad.chunks(out_h * out_w)) {
            for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let g = go[oy * out_w + ox];
                    gp[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                    gp[y0 * w + x1] += g * fx * (1.0 - fy);
                    gp[y1 * w + x0] += g * (1.0 - fx) * fy;
                    gp[y1 * w + x1] += g * fx * fy;
                }
            }
        }
        vec![Some(gx)]
    }))
}
