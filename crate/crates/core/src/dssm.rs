//! Deformable state-space modeling.
//!
//! The state update of the 2D scan reads its input from `K` points around
//! the current position `p_t`: anchor `a_k` displaced by a predicted offset
//! `o_{k,t}`, sampled bilinearly with zero padding and mixed with predicted
//! scalar weights `b_k`:
//!
//! `h_t = Ā h_{t−1} + B̄ Σ_k b_k x(p_t + a_k + o_{k,t})`, `y_t = C h_t + D x(p_t)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId};
use crate::par;
use crate::ssm::{
    discretize_zoh, discretize_zoh_selective, selective_params, ssm_scan_with_skip, sweep_positions,
    SelectivePredictors, SsmLayer, SsmParams,
};
use crate::tensor::sample::bilinear_taps;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorVariant {
    K1,
    #[default]
    K9,
    K25,
}

impl AnchorVariant {
    pub fn radius(self) -> i64 {
        match self {
            Self::K1 => 0,
            Self::K9 => 1,
            Self::K25 => 2,
        }
    }

    pub fn count(self) -> usize {
        let side = 2 * self.radius() as usize + 1;
        side * side
    }

    pub fn from_count(k: usize) -> Option<Self> {
        match k {
            1 => Some(Self::K1),
            9 => Some(Self::K9),
            25 => Some(Self::K25),
            _ => None,
        }
    }
}

impl fmt::Display for AnchorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.count())
    }
}

impl FromStr for AnchorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().trim_start_matches(['K', 'k']);
        k.parse::<usize>()
            .ok()
            .and_then(Self::from_count)
            .ok_or_else(|| Error::contract("AnchorVariant", format!("anchors must be 1, 9 or 25, got {s:?}")))
    }
}

/// Integer displacements `(dx, dy)`, row-major over `dy` then `dx`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorGrid {
    pub anchors: Vec<(i64, i64)>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index of anchor `(dx, dy)`.
    pub fn index_of(&self, a: (i64, i64)) -> Option<usize> {
        self.anchors.iter().position(|&b| b == a)
    }
}

pub fn anchor_grid(variant: AnchorVariant) -> AnchorGrid {
    let r = variant.radius();
    let anchors = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    AnchorGrid { anchors }
}

/// Linear predictors of offsets (`d → 2K`) and anchor weights (`d → K`).
/// Offset row `2k` is the x displacement of anchor `k`, row `2k+1` the y one.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformablePredictors {
    /// `[2K, d]`
    pub w_off: Tensor,
    /// `[2K]`
    pub b_off: Tensor,
    /// `[K, d]`
    pub w_wt: Tensor,
    /// `[K]`
    pub b_wt: Tensor,
}

impl DeformablePredictors {
    /// Zero weights, zero offset bias, anchor-weight bias `1/K`.
    pub fn init(d: usize, k: usize) -> Self {
        Self {
            w_off: Tensor::zeros(&[2 * k, d]),
            b_off: Tensor::zeros(&[2 * k]),
            w_wt: Tensor::zeros(&[k, d]),
            b_wt: Tensor::full(&[k], 1.0 / k as f64),
        }
    }

    pub fn anchors(&self) -> usize {
        self.b_wt.len()
    }
}

/// `o = reshape(W_off x_t + b_off)` as `[K, 2]` and `b = W_wt x_t + b_wt`.
pub fn predict_offsets_weights(x_t: &Tensor, pred: &DeformablePredictors) -> Result<(Tensor, Tensor)> {
    let k = pred.anchors();
    let d = x_t.len();
    ensure!(
        pred.w_off.shape() == [2 * k, d] && pred.w_wt.shape() == [k, d] && pred.b_off.len() == 2 * k,
        "predict_offsets_weights",
        "predictor shapes do not match d={d}, K={k}"
    );
    let matvec = |w: &Tensor, b: &Tensor, rows: usize| -> Vec<f64> {
        (0..rows)
            .map(|r| b.data()[r] + (0..d).map(|j| w.data()[r * d + j] * x_t.data()[j]).sum::<f64>())
            .collect()
    };
    Ok((
        Tensor::from_parts(vec![k, 2], matvec(&pred.w_off, &pred.b_off, 2 * k)),
        Tensor::from_parts(vec![k], matvec(&pred.w_wt, &pred.b_wt, k)),
    ))
}

/// `Σ_k b_k · X(p + a_k + o_k)` for `X: [d, H, W]` and a 0-based grid point
/// `p = (x, y)`.
pub fn deformable_aggregate(
    x: &Tensor,
    p: (usize, usize),
    o: &Tensor,
    b: &Tensor,
    anchors: &AnchorGrid,
) -> Result<Tensor> {
    ensure!(x.ndim() == 3, "deformable_aggregate", "X must be [d,H,W], got {:?}", x.shape());
    let (d, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let k = anchors.len();
    ensure!(p.0 < w && p.1 < h, "deformable_aggregate", "point {p:?} is off the {h}x{w} grid");
    ensure!(
        o.shape() == [k, 2] && b.shape() == [k],
        "deformable_aggregate",
        "expected o [{k},2] and b [{k}], got {:?} and {:?}",
        o.shape(),
        b.shape()
    );
    let mut out = vec![0.0; d];
    for (j, &(ax, ay)) in anchors.anchors.iter().enumerate() {
        let px = p.0 as f64 + ax as f64 + o.data()[2 * j];
        let py = p.1 as f64 + ay as f64 + o.data()[2 * j + 1];
        let bk = b.data()[j];
        for tap in bilinear_taps(px, py, h, w) {
            for (c, acc) in out.iter_mut().enumerate() {
                *acc += bk * tap.weight * x.data()[c * h * w + tap.idx];
            }
        }
    }
    Ok(Tensor::from_parts(vec![d], out))
}

/// Tape op: for `u: [Nb, E, H, W]`, offsets `[Nb, 2K, H, W]` and anchor
/// weights `[Nb, K, H, W]`, every site gathers its deformable aggregate.
pub fn deformable_sample(tape: &mut Tape, u: Var, offsets: Var, weights: Var, anchors: &AnchorGrid) -> Result<Var> {
    const OP: &str = "deformable_sample";
    let ut = tape.value(u);
    ensure!(ut.ndim() == 4, OP, "input must be NCHW, got {:?}", ut.shape());
    let (nb, e, h, w) = (ut.dim(0), ut.dim(1), ut.dim(2), ut.dim(3));
    let k = anchors.len();
    ensure!(
        tape.value(offsets).shape() == [nb, 2 * k, h, w],
        OP,
        "offsets must be [{nb},{},{h},{w}], got {:?}",
        2 * k,
        tape.value(offsets).shape()
    );
    ensure!(
        tape.value(weights).shape() == [nb, k, h, w],
        OP,
        "weights must be [{nb},{k},{h},{w}], got {:?}",
        tape.value(weights).shape()
    );
    let hw = h * w;
    let anchors = anchors.anchors.clone();
    let point = move |off: &[f64], j: usize, site: usize| {
        let (x, y) = ((site % w) as f64, (site / w) as f64);
        (
            x + anchors[j].0 as f64 + off[(2 * j) * hw + site],
            y + anchors[j].1 as f64 + off[(2 * j + 1) * hw + site],
        )
    };
    let (uv, ov, wv) = (tape.value(u), tape.value(offsets), tape.value(weights));
    let mut out = vec![0.0; nb * e * hw];
    par::for_each_chunk(&mut out, e * hw, |i, o| {
        let src = &uv.data()[i * e * hw..(i + 1) * e * hw];
        let off = &ov.data()[i * 2 * k * hw..(i + 1) * 2 * k * hw];
        let wt = &wv.data()[i * k * hw..(i + 1) * k * hw];
        for site in 0..hw {
            for j in 0..k {
                let (px, py) = point(off, j, site);
                let bk = wt[j * hw + site];
                for tap in bilinear_taps(px, py, h, w) {
                    let s = bk * tap.weight;
                    for c in 0..e {
                        o[c * hw + site] += s * src[c * hw + tap.idx];
                    }
                }
            }
        }
    });
    let out = Tensor::from_parts(vec![nb, e, h, w], out);
    Ok(tape.push_fn(OP, out, &[u, offsets, weights], move |p, _, grad, _| {
        let parts = par::map(nb, |i| {
            let src = &p[0].data()[i * e * hw..(i + 1) * e * hw];
            let off = &p[1].data()[i * 2 * k * hw..(i + 1) * 2 * k * hw];
            let wt = &p[2].data()[i * k * hw..(i + 1) * k * hw];
            let g = &grad[i * e * hw..(i + 1) * e * hw];
            let mut gu = vec![0.0; e * hw];
            let mut goff = vec![0.0; 2 * k * hw];
            let mut gwt = vec![0.0; k * hw];
            for site in 0..hw {
                for j in 0..k {
                    let (px, py) = point(off, j, site);
                    let bk = wt[j * hw + site];
                    let (mut sv, mut sx, mut sy) = (0.0, 0.0, 0.0);
                    for tap in bilinear_taps(px, py, h, w) {
                        let mut dot = 0.0;
                        for c in 0..e {
                            let gc = g[c * hw + site];
                            dot += gc * src[c * hw + tap.idx];
                            gu[c * hw + tap.idx] += gc * bk * tap.weight;
                        }
                        sv += tap.weight * dot;
                        sx += tap.dx * dot;
                        sy += tap.dy * dot;
                    }
                    gwt[j * hw + site] = sv;
                    goff[2 * j * hw + site] = bk * sx;
                    goff[(2 * j + 1) * hw + site] = bk * sy;
                }
            }
            (gu, goff, gwt)
        });
        let mut gu = Vec::with_capacity(nb * e * hw);
        let mut goff = Vec::with_capacity(nb * 2 * k * hw);
        let mut gwt = Vec::with_capacity(nb * k * hw);
        for (a, b, c) in parts {
            gu.extend(a);
            goff.extend(b);
            gwt.extend(c);
        }
        vec![Some(gu), Some(goff), Some(gwt)]
    }))
}

/// Samples `x: [d, s]` at `t + δ_t` by linear interpolation, zero outside.
pub fn shift_lerp_1d(x: &Tensor, deltas: &[f64]) -> Result<Tensor> {
    ensure!(x.ndim() == 2, "shift_lerp_1d", "x must be [d,s], got {:?}", x.shape());
    let (d, s) = (x.dim(0), x.dim(1));
    ensure!(deltas.len() == s, "shift_lerp_1d", "{} offsets for {s} tokens", deltas.len());
    let mut out = vec![0.0; d * s];
    for (t, &dt) in deltas.iter().enumerate() {
        for tap in bilinear_taps(t as f64 + dt, 0.0, 1, s) {
            for c in 0..d {
                out[c * s + t] += tap.weight * x.data()[c * s + tap.idx];
            }
        }
    }
    Ok(Tensor::from_parts(vec![d, s], out))
}

/// Token-wise offset predictor of the 1D scan: `δ_t = w · x_t + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetPredictor1d {
    /// `[d]`
    pub w: Tensor,
    pub bias: f64,
}

impl OffsetPredictor1d {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d]),
            bias: 0.0,
        }
    }

    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        let (d, s) = (x.dim(0), x.dim(1));
        (0..s)
            .map(|t| self.bias + (0..d).map(|c| self.w.data()[c] * x.data()[c * s + t]).sum::<f64>())
            .collect()
    }
}

/// One-dimensional deformable scan: the state update reads `x(t + δ_t)`,
/// the skip reads `x(t)`.
pub fn dssm_scan_1d(params: &SsmParams, x: &Tensor, pred: &OffsetPredictor1d) -> Result<Tensor> {
    ensure!(
        x.ndim() == 2 && pred.w.len() == x.dim(0),
        "dssm_scan_1d",
        "x {:?} does not match the predictor width {}",
        x.shape(),
        pred.w.len()
    );
    let u = shift_lerp_1d(x, &pred.predict(x))?;
    let disc = discretize_zoh(params)?;
    ssm_scan_with_skip(&disc, &params.c, &params.d, x, &u)
}

/// Reference 2D deformable scan over `x: [d, H, W]`.
///
/// With `selective` predictors, `B_t`, `C_t`, `Δ_t` come from the token
/// `x(p_t)` and only `A` and `D` of `ssm` are used.
pub fn dssm_scan_2d(
    x: &Tensor,
    pred: &DeformablePredictors,
    anchors: &AnchorGrid,
    ssm: &SsmParams,
    selective: Option<&SelectivePredictors>,
) -> Result<Tensor> {
    ensure!(x.ndim() == 3, "dssm_scan_2d", "X must be [d,H,W], got {:?}", x.shape());
    let (d, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    ensure!(pred.anchors() == anchors.len(), "dssm_scan_2d", "predictor has {} anchors, grid {}", pred.anchors(), anchors.len());
    let order = sweep_positions(h, w)?;
    let s = h * w;
    let mut seq = Tensor::zeros(&[d, s]);
    let mut agg = Tensor::zeros(&[d, s]);
    for (t, &(px, py)) in order.positions.iter().enumerate() {
        let token = Tensor::from_fn(&[d], |c| x.at(&[c, py, px]));
        let (o, b) = predict_offsets_weights(&token, pred)?;
        let a = deformable_aggregate(x, (px, py), &o, &b, anchors)?;
        for c in 0..d {
            seq.set(&[c, t], token.data()[c]);
            agg.set(&[c, t], a.data()[c]);
        }
    }
    let y = match selective {
        None => {
            let disc = discretize_zoh(ssm)?;
            ssm_scan_with_skip(&disc, &ssm.c, &ssm.d, &seq, &agg)?
        }
        Some(sp) => {
            let p = selective_params(&seq, sp)?;
            let disc = discretize_zoh_selective(&ssm.a, &p.b, &p.delta)?;
            ssm_scan_with_skip(&disc, &p.c, &ssm.d, &seq, &agg)?
        }
    };
    let mut out = Tensor::zeros(&[d, h, w]);
    for (t, &(px, py)) in order.positions.iter().enumerate() {
        for c in 0..d {
            out.set(&[c, py, px], y.at(&[c, t]));
        }
    }
    Ok(out)
}

/// Deformable SSM layer over `[Nb, E, H, W]` maps.
#[derive(Clone, Debug)]
pub struct DssmLayer {
    pub anchors: AnchorGrid,
    pub offset: Linear,
    pub weight: Linear,
    pub ssm: SsmLayer,
}

impl DssmLayer {
    pub fn new(
        init: &mut Init<'_>,
        channels: usize,
        state_size: usize,
        rank: usize,
        variant: AnchorVariant,
        selective: bool,
    ) -> Self {
        let anchors = anchor_grid(variant);
        let k = anchors.len();
        let offset = Linear::zeros(init, "offset", channels, 2 * k, true);
        let weight = Linear::zeros(init, "anchor_weight", channels, k, true);
        if let Some(b) = weight.bias {
            init.store_mut().get_mut(b).data_mut().fill(1.0 / k as f64);
        }
        let ssm = SsmLayer::new(&mut init.sub("ssm"), channels, state_size, rank, selective);
        Self { anchors, offset, weight, ssm }
    }

    /// Parameters of the offset predictor, for freezing in ablations.
    pub fn offset_params(&self) -> Vec<ParamId> {
        std::iter::once(self.offset.weight).chain(self.offset.bias).collect()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, u: Var) -> Result<Var> {
        let off = self.offset.forward(ctx, u)?;
        let wt = self.weight.forward(ctx, u)?;
        let agg = deformable_sample(&mut ctx.tape, u, off, wt, &self.anchors)?;
        self.ssm.forward(ctx, u, agg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ssm_scan;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_variants() {
        assert_eq!(anchor_grid(AnchorVariant::K1).anchors, vec![(0, 0)]);
        let g9 = anchor_grid(AnchorVariant::K9);
        assert_eq!(g9.len(), 9);
        assert_eq!(anchor_grid(AnchorVariant::K25).len(), 25);
        for g in [g9, anchor_grid(AnchorVariant::K25)] {
            for &(x, y) in &g.anchors {
                assert!(g.index_of((-x, -y)).is_some());
            }
        }
        assert_eq!("9".parse::<AnchorVariant>().unwrap(), AnchorVariant::K9);
        assert!("4".parse::<AnchorVariant>().is_err());
    }

    #[test]
    fn zero_predictors_give_zero_offsets_and_bias_weights() {
        let pred = DeformablePredictors::init(3, 9);
        let x = Tensor::new(&[3], vec![0.3, -2.0, 5.0]).unwrap();
        let (o, b) = predict_offsets_weights(&x, &pred).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
        assert!(b.data().iter().all(|&v| v == 1.0 / 9.0));
    }

    #[test]
    fn aggregate_box_filter_and_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
        let g = anchor_grid(AnchorVariant::K9);
        let o = Tensor::zeros(&[9, 2]);
        let b = Tensor::full(&[9], 1.0 / 9.0);
        let got = deformable_aggregate(&x, (2, 1), &o, &b, &g).unwrap();
        for c in 0..2 {
            let mut want = 0.0;
            for y in 0..3 {
                for xx in 1..4 {
                    want += x.at(&[c, y, xx]) / 9.0;
                }
            }
            assert!((got.data()[c] - want).abs() < 1e-15);
        }
        let ones = Tensor::full(&[9], 1.0);
        let corner = deformable_aggregate(&x, (0, 0), &o, &ones, &g).unwrap();
        for c in 0..2 {
            let want = x.at(&[c, 0, 0]) + x.at(&[c, 0, 1]) + x.at(&[c, 1, 0]) + x.at(&[c, 1, 1]);
            assert!((corner.data()[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn one_dimensional_scan_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = SsmParams::init(3, 4, &mut rng);
        let x = Tensor::uniform(&[3, 7], -1.0, 1.0, &mut rng);
        let disc = discretize_zoh(&params).unwrap();
        let plain = ssm_scan(&disc, &params.c, &params.d, &x).unwrap();
        let zero = dssm_scan_1d(&params, &x, &OffsetPredictor1d::zeros(3)).unwrap();
        assert!(plain.max_abs_diff(&zero) < 1e-15);

        let shift = OffsetPredictor1d { w: Tensor::zeros(&[3]), bias: 1.0 };
        let got = dssm_scan_1d(&params, &x, &shift).unwrap();
        let shifted = Tensor::from_fn(&[3, 7], |i| if i % 7 == 6 { 0.0 } else { x.data()[i + 1] });
        let want = ssm_scan_with_skip(&disc, &params.c, &params.d, &x, &shifted).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);

        let z = dssm_scan_1d(&params, &Tensor::zeros(&[3, 7]), &shift).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    /// Three nested loops over tokens, channels and anchors with a
    /// hand-written bilinear sampler.
    fn naive_dssm(x: &Tensor, pred: &DeformablePredictors, g: &AnchorGrid, p: &SsmParams) -> Tensor {
        let (d, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let n = p.state_size();
        let k = g.len();
        let sample = |c: usize, fx: f64, fy: f64| -> f64 {
            let (x0, y0) = (fx.floor(), fy.floor());
            let mut v = 0.0;
            for (cx, wx) in [(x0, 1.0 - (fx - x0)), (x0 + 1.0, fx - x0)] {
                for (cy, wy) in [(y0, 1.0 - (fy - y0)), (y0 + 1.0, fy - y0)] {
                    if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
                        v += wx * wy * x.at(&[c, cy as usize, cx as usize]);
                    }
                }
            }
            v
        };
        let mut hstate = vec![vec![0.0; n]; d];
        let mut out = Tensor::zeros(&[d, h, w]);
        for t in 0..h * w {
            let (px, py) = (t % w, t / w);
            let tok: Vec<f64> = (0..d).map(|c| x.at(&[c, py, px])).collect();
            for c in 0..d {
                let mut inp = 0.0;
                for j in 0..k {
                    let lin = |wm: &Tensor, bv: &Tensor, r: usize| bv.data()[r] + (0..d).map(|q| wm.at(&[r, q]) * tok[q]).sum::<f64>();
                    let ox = lin(&pred.w_off, &pred.b_off, 2 * j);
                    let oy = lin(&pred.w_off, &pred.b_off, 2 * j + 1);
                    let bk = lin(&pred.w_wt, &pred.b_wt, j);
                    let (ax, ay) = g.anchors[j];
                    inp += bk * sample(c, px as f64 + ax as f64 + ox, py as f64 + ay as f64 + oy);
                }
                let dt = p.delta.data()[c];
                let mut y = p.d.data()[c] * tok[c];
                for s in 0..n {
                    let a = p.a.at(&[c, s]);
                    let ab = (dt * a).exp();
                    let bb = (ab - 1.0) / a * p.b.at(&[s, c]);
                    hstate[c][s] = ab * hstate[c][s] + bb * inp;
                    y += p.c.at(&[c, s]) * hstate[c][s];
                }
                out.set(&[c, py, px], y);
            }
        }
        out
    }

    #[test]
    fn scan_matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SsmParams::init(4, 3, &mut rng);
        let g = anchor_grid(AnchorVariant::K9);
        let pred = DeformablePredictors {
            w_off: Tensor::uniform(&[18, 4], -0.5, 0.5, &mut rng),
            b_off: Tensor::uniform(&[18], -0.5, 0.5, &mut rng),
            w_wt: Tensor::uniform(&[9, 4], -0.5, 0.5, &mut rng),
            b_wt: Tensor::uniform(&[9], -0.5, 0.5, &mut rng),
        };
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let got = dssm_scan_2d(&x, &pred, &g, &params, None).unwrap();
        let want = naive_dssm(&x, &pred, &g, &params);
        assert!(got.max_abs_diff(&want) < 1e-10, "{}", got.max_abs_diff(&want));
    }

    #[test]
    fn single_site_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = SsmParams::init(2, 3, &mut rng);
        let x = Tensor::uniform(&[2, 1, 1], -1.0, 1.0, &mut rng);
        let pred = DeformablePredictors::init(2, 9);
        let y = dssm_scan_2d(&x, &pred, &anchor_grid(AnchorVariant::K9), &params, None).unwrap();
        let disc = discretize_zoh(&params).unwrap();
        for c in 0..2 {
            let cb: f64 = (0..3).map(|s| params.c.at(&[c, s]) * disc.b_bar.at(&[s, c])).sum();
            let want = cb * x.data()[c] / 9.0 + params.d.data()[c] * x.data()[c];
            assert!((y.data()[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_sample_matches_reference_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = anchor_grid(AnchorVariant::K9);
        let u = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let off = Tensor::uniform(&[2, 18, 4, 4], -1.5, 1.5, &mut rng);
        let wt = Tensor::uniform(&[2, 9, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (uv, ov, wv) = (tape.constant(u.clone()), tape.constant(off.clone()), tape.constant(wt.clone()));
        let y = deformable_sample(&mut tape, uv, ov, wv, &g).unwrap();
        let y = tape.value(y);
        for i in 0..2 {
            let map = Tensor::from_fn(&[3, 4, 4], |q| u.data()[i * 48 + q]);
            for site in 0..16 {
                let o = Tensor::from_fn(&[9, 2], |q| off.at(&[i, q, site / 4, site % 4]));
                let b = Tensor::from_fn(&[9], |q| wt.at(&[i, q, site / 4, site % 4]));
                let a = deformable_aggregate(&map, (site % 4, site / 4), &o, &b, &g).unwrap();
                for c in 0..3 {
                    assert!((a.data()[c] - y.at(&[i, c, site / 4, site % 4])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn fused_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = anchor_grid(AnchorVariant::K9);
        // Offsets away from integers keep the bilinear stencil smooth.
        let off = Tensor::from_fn(&[1, 18, 3, 3], |_| {
            let v: f64 = rand::Rng::random_range(&mut rng, -1.4..1.4);
            v.floor() + 0.2 + 0.6 * (v - v.floor())
        });
        let inputs = vec![
            Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng),
            off,
            Tensor::uniform(&[1, 9, 3, 3], -1.0, 1.0, &mut rng),
        ];
        let r = crate::tensor::grad_check_report("deformable_sample", &inputs, 1e-5, usize::MAX, |t, v| {
            let y = deformable_sample(t, v[0], v[1], v[2], &g)?;
            let sq = crate::tensor::square(t, y);
            Ok(crate::tensor::sum(t, sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
