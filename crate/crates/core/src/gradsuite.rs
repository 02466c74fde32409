//! Finite-difference checks of every tape operation and every block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{count_params, ArchSpec};
use crate::blocks::{BasicBlock, ConvStem, Downsample, Ffn, MixerBlock, MixerKind};
use crate::dssm::{anchor_grid, deformable_sample};
use crate::error::Result;
use crate::nn::{param_grad_check, probe_loss, seeded_rng, Ctx, Init, ParamStore};
use crate::pose::{HeadConfig, PoseHead, PoseModel, PoseOutputs};
use crate::ssm::{selective_scan, ScanMode, ScanVars};
use crate::tensor::{self, grad_check_report, BatchNormMode, GradCheckReport, Tape, Tensor, Var};
use crate::train::compute_loss;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates checked per tensor.
pub const MAX_COORDS: usize = 12;
/// Whole-model checks only run below this many parameters.
pub const MODEL_CHECK_LIMIT: usize = 2_000_000;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let s = [2, 3, 2, 2];
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name, $inputs, Box::new($f)))
        };
    }
    case!("add", vec![uniform(&s, -1., 1., rng), uniform(&s, -1., 1., rng)], |t, v| tensor::add(t, v[0], v[1]));
    case!("mul", vec![uniform(&s, -1., 1., rng), uniform(&s, -1., 1., rng)], |t, v| tensor::mul(t, v[0], v[1]));
    case!("scale", vec![uniform(&s, -1., 1., rng)], |t, v| Ok(tensor::scale(t, v[0], -1.7)));
    case!("square", vec![uniform(&s, -1., 1., rng)], |t, v| Ok(tensor::square(t, v[0])));
    case!("sum", vec![uniform(&s, -1., 1., rng)], |t, v| Ok(tensor::sum(t, v[0])));
    case!("mean", vec![uniform(&s, -1., 1., rng)], |t, v| Ok(tensor::mean(t, v[0])));
    case!("exp", vec![uniform(&s, -1., 1., rng)], |t, v| Ok(tensor::exp(t, v[0])));
    case!("reshape", vec![uniform(&s, -1., 1., rng)], |t, v| tensor::reshape(t, v[0], &[6, 4]));
    case!("relu", vec![away_from_zero(&s, rng)], |t, v| Ok(tensor::relu(t, v[0])));
    case!("gelu", vec![uniform(&s, -3., 3., rng)], |t, v| Ok(tensor::gelu(t, v[0])));
    case!("silu", vec![uniform(&s, -3., 3., rng)], |t, v| Ok(tensor::silu(t, v[0])));
    case!("softplus", vec![uniform(&s, -3., 3., rng)], |t, v| Ok(tensor::softplus(t, v[0])));
    case!("global_avg_pool", vec![uniform(&s, -1., 1., rng)], |t, v| tensor::global_avg_pool(t, v[0]));

    let mut target = uniform(&[2, 3, 3, 3], 0.0, 1.0, rng);
    for map in target.data_mut().chunks_mut(9) {
        let z: f64 = map.iter().sum();
        map.iter_mut().for_each(|p| *p /= z);
    }
    case!("softmax_cross_entropy", vec![uniform(&[2, 3, 3, 3], -2., 2., rng)], move |t, v| {
        tensor::softmax_cross_entropy(t, v[0], &target)
    });
    let l1_target = uniform(&s, -1., 1., rng);
    let pred = {
        let mut off = away_from_zero(&s, rng);
        off.data_mut().iter_mut().zip(l1_target.data()).for_each(|(o, t)| *o += t);
        off
    };
    case!("l1_loss", vec![pred], move |t, v| tensor::l1_loss(t, v[0], &l1_target));

    case!(
        "conv2d",
        vec![uniform(&[2, 3, 5, 5], -1., 1., rng), uniform(&[4, 3, 3, 3], -1., 1., rng), uniform(&[4], -1., 1., rng)],
        |t, v| tensor::conv2d(t, v[0], v[1], Some(v[2]), 1, 1)
    );
    case!(
        "conv2d_stride2",
        vec![uniform(&[1, 2, 6, 6], -1., 1., rng), uniform(&[3, 2, 3, 3], -1., 1., rng)],
        |t, v| tensor::conv2d(t, v[0], v[1], None, 2, 1)
    );
    case!(
        "linear_channels",
        vec![uniform(&s, -1., 1., rng), uniform(&[5, 3], -1., 1., rng), uniform(&[5], -1., 1., rng)],
        |t, v| tensor::linear_channels(t, v[0], v[1], Some(v[2]))
    );
    case!(
        "depthwise_causal_conv1d",
        vec![uniform(&[2, 3, 7], -1., 1., rng), uniform(&[3, 4], -1., 1., rng), uniform(&[3], -1., 1., rng)],
        |t, v| tensor::depthwise_causal_conv1d(t, v[0], v[1], v[2])
    );
    case!(
        "layer_norm_channels",
        vec![uniform(&[2, 4, 2, 3], -1., 1., rng), uniform(&[4], 0.5, 1.5, rng), uniform(&[4], -1., 1., rng)],
        |t, v| tensor::layer_norm_channels(t, v[0], v[1], v[2])
    );
    case!(
        "batch_norm",
        vec![uniform(&[3, 2, 2, 3], -1., 1., rng), uniform(&[2], 0.5, 1.5, rng), uniform(&[2], -1., 1., rng)],
        |t, v| Ok(tensor::batch_norm(t, v[0], v[1], v[2], BatchNormMode::Train)?.0)
    );
    case!("resize_bilinear", vec![uniform(&[1, 2, 3, 2], -1., 1., rng)], |t, v| {
        tensor::resize_bilinear(t, v[0], 7, 5)
    });

    let grid = anchor_grid(crate::dssm::AnchorVariant::K9);
    let offsets = Tensor::from_fn(&[1, 18, 3, 3], |_| {
        let v: f64 = rng.random_range(-1.4..1.4);
        v.floor() + 0.2 + 0.6 * (v - v.floor())
    });
    case!(
        "deformable_sample",
        vec![uniform(&[1, 2, 3, 3], -1., 1., rng), offsets, uniform(&[1, 9, 3, 3], -1., 1., rng)],
        move |t, v| deformable_sample(t, v[0], v[1], v[2], &grid)
    );

    let (nb, e, n, h, w) = (2, 3, 2, 2, 3);
    let l = h * w;
    case!(
        "selective_scan",
        vec![
            uniform(&[nb, e, h, w], -1., 1., rng),
            uniform(&[nb, e, h, w], -1., 1., rng),
            uniform(&[nb, e, l], 0.05, 0.8, rng),
            uniform(&[e, n], -2., -0.2, rng),
            uniform(&[nb, n, l], -1., 1., rng),
            uniform(&[nb, n, l], -1., 1., rng),
            uniform(&[e], -1., 1., rng),
        ],
        |t, v| scan(t, v, ScanMode::Selective)
    );
    case!(
        "static_scan",
        vec![
            uniform(&[nb, e, h, w], -1., 1., rng),
            uniform(&[nb, e, h, w], -1., 1., rng),
            uniform(&[e], 0.05, 0.8, rng),
            uniform(&[e, n], -2., -0.2, rng),
            uniform(&[n, e], -1., 1., rng),
            uniform(&[e, n], -1., 1., rng),
            uniform(&[e], -1., 1., rng),
        ],
        |t, v| scan(t, v, ScanMode::Static)
    );
    cases
}

/// Every tape operation on inputs drawn from `seed`.
pub fn run_ops(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .enumerate()
        .map(|(k, (name, inputs, f))| {
            grad_check_report(name, &inputs, EPS, MAX_COORDS, |t, v| {
                let y = f(t, v)?;
                probe_loss(t, y, seed + k as u64)
            })
        })
        .collect()
}

fn scan(t: &mut Tape, v: &[Var], mode: ScanMode) -> Result<Var> {
    let vars = ScanVars { x: v[0], u: v[1], delta: v[2], a: v[3], b: v[4], c: v[5], d: v[6] };
    selective_scan(t, vars, mode)
}

/// Builds a module into a fresh store and perturbs every entry so that no
/// zero-initialized branch hides a gradient.
fn fresh<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let m = f(&mut Init::new(&mut store, &mut rng));
    store.perturb(seed + 1, 0.2);
    (store, m)
}

type BlockFn<'a> = &'a dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>;

fn block_check(name: &str, store: &ParamStore, x: &Tensor, f: BlockFn<'_>) -> Result<GradCheckReport> {
    param_grad_check(name, store, std::slice::from_ref(x), EPS, MAX_COORDS, true, |c, v| {
        let y = f(c, v[0])?;
        probe_loss(&mut c.tape, y, 7)
    })
}

fn probe_outputs(ctx: &mut Ctx<'_>, logits: Var, depths: Var) -> Result<Var> {
    let a = probe_loss(&mut ctx.tape, logits, 8)?;
    let b = probe_loss(&mut ctx.tape, depths, 9)?;
    tensor::add(&mut ctx.tape, a, b)
}

/// Every tape operation, every block kind configured by `spec.mixer`, the
/// pose head with its loss and, for small enough specs, the whole model.
pub fn run(spec: &ArchSpec, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = run_ops(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);

    let c = 4;
    let x = uniform(&[2, c, 4, 4], -1., 1., &mut rng);
    let (store, b) = fresh(seed + 10, |i| BasicBlock::new(i, c));
    out.push(block_check("basic_block", &store, &x, &|ctx, v| b.forward(ctx, v))?);
    for (k, kind) in [MixerKind::Gated, MixerKind::Ssm, MixerKind::Dssm].into_iter().enumerate() {
        let (store, b) = fresh(seed + 20 + 2 * k as u64, |i| MixerBlock::new(i, c, kind, &spec.mixer));
        let name = match kind {
            MixerKind::Gated => "gated_block",
            MixerKind::Ssm => "ssm_block",
            MixerKind::Dssm => "dssm_block",
        };
        out.push(block_check(name, &store, &x, &|ctx, v| b.forward(ctx, v))?);
    }
    let (store, f) = fresh(seed + 30, |i| Ffn::new(i, c));
    out.push(block_check("ffn", &store, &x, &|ctx, v| f.forward(ctx, v))?);
    let (store, d) = fresh(seed + 32, |i| Downsample::new(i, c, 2 * c));
    out.push(block_check("downsample", &store, &x, &|ctx, v| d.forward(ctx, v))?);
    let img = uniform(&[2, 3, 8, 8], -1., 1., &mut rng);
    let (store, s) = fresh(seed + 34, |i| ConvStem::new(i, 3, c));
    out.push(block_check("stem", &store, &img, &|ctx, v| s.forward(ctx, v))?);

    let levels = [3, 4, 5, 6];
    let pyramid: Vec<Tensor> = levels
        .iter()
        .enumerate()
        .map(|(i, &w)| uniform(&[2, w, 8 >> i, 8 >> i], -1., 1., &mut rng))
        .collect();
    let (store, head) = fresh(seed + 40, |i| PoseHead::new(i, &levels, 4, 3));
    out.push(param_grad_check("pose_head", &store, &pyramid, EPS, MAX_COORDS, true, |ctx, v| {
        let (logits, depths) = head.forward(ctx, v)?;
        probe_outputs(ctx, logits, depths)
    })?);
    let mut hm = uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    for map in hm.data_mut().chunks_mut(64) {
        let z: f64 = map.iter().sum();
        map.iter_mut().for_each(|p| *p /= z);
    }
    let dz = away_from_zero(&[2, 3, 1, 1], &mut rng).map(|v| v * 30.0);
    out.push(param_grad_check("pose_loss", &store, &pyramid, EPS, MAX_COORDS, true, |ctx, v| {
        let (logits, depths) = head.forward(ctx, v)?;
        compute_loss(ctx, &PoseOutputs { logits, depths }, &hm, &dz, 1.0, 0.02)
    })?);

    let head_cfg = HeadConfig { width: 8, joints: 3 };
    let (model, mut store) = PoseModel::build(spec, 3, head_cfg, seed + 50)?;
    if count_params(&store) <= MODEL_CHECK_LIMIT {
        store.perturb(seed + 51, 0.05);
        let img = uniform(&[2, 3, 32, 32], -1., 1., &mut rng);
        out.push(param_grad_check("pose_model", &store, &[img], EPS, MAX_COORDS, true, |ctx, v| {
            let o = model.forward(ctx, v[0])?;
            probe_outputs(ctx, o.logits, o.depths)
        })?);
    }
    Ok(out)
}

/// `true` when every report is within [`TOLERANCE`].
pub fn all_pass(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.max_rel_error < TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;

    #[test]
    fn ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, (name, inputs, f)) in op_cases(&mut rng).into_iter().enumerate() {
            let r = grad_check_report(name, &inputs, EPS, usize::MAX, |t, v| {
                let y = f(t, v)?;
                probe_loss(t, y, k as u64)
            })
            .unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{r:?}");
        }
    }

    #[test]
    fn suite_covers_blocks_and_model() {
        let spec = ArchSpec::preset("CCDGDG", Preset::Tiny).unwrap();
        let reports = run(&spec, 0).unwrap();
        for name in ["dssm_block", "pose_loss", "pose_model", "stem"] {
            assert!(reports.iter().any(|r| r.name == name), "{name}");
        }
        let bad: Vec<_> = reports.iter().filter(|r| r.max_rel_error >= TOLERANCE).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }
}
