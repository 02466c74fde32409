//! Heatmap-plus-depth pose head, soft-argmax decoding and evaluation metrics.
//!
//! The head fuses the pyramid at stride 4, predicts one heatmap per joint and
//! a root-relative depth per joint. Decoding takes the expectation of the
//! normalized heatmap, maps grid cells to pixel centers and back-projects
//! through the camera intrinsics.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone_into, ArchSpec, Backbone, PYRAMID_STRIDES};
use crate::error::{ensure, Result};
use crate::nn::{seeded_rng, Conv2d, Ctx, Init, Linear, ParamStore};
use crate::tensor::{self, Tensor, Var};

pub const NUM_JOINTS: usize = 21;
pub const ROOT: usize = 0;
/// Heatmap grid stride relative to the input image.
pub const HEATMAP_STRIDE: usize = 4;
/// Millimeters per unit of the depth branch output.
pub const DEPTH_SCALE: f64 = 100.0;
/// Default PCK thresholds: 0..=50 mm in 1 mm steps.
pub const AUC_MAX_MM: usize = 50;

/// Pinhole camera with a single focal length, in pixels. Pixel `(u, v)` is
/// the continuous coordinate whose integer cells are centered at `+0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.focal * p[0] / p[2] + self.cx, self.focal * p[1] / p[2] + self.cy)
    }

    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.focal, (v - self.cy) * z / self.focal, z]
    }
}

/// Camera-space joints in millimeters; index [`ROOT`] is the wrist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSet {
    pub joints: Vec<[f64; 3]>,
}

impl JointSet {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn translate(&self, t: [f64; 3]) -> Self {
        Self::new(self.joints.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect())
    }

    /// Depth of every joint relative to the root.
    pub fn relative_depths(&self) -> Vec<f64> {
        let z0 = self.joints[ROOT][2];
        self.joints.iter().map(|p| p[2] - z0).collect()
    }
}

/// Normalized heatmaps `[J, h, w]` and root-relative depths in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub heatmaps: Tensor,
    pub depths: Vec<f64>,
    pub stride: usize,
}

impl HeatmapStack {
    /// Softmax over each map of `logits: [J, h, w]`.
    pub fn from_logits(logits: &Tensor, depths: Vec<f64>, stride: usize) -> Result<Self> {
        ensure!(logits.ndim() == 3, "HeatmapStack", "logits must be [J,h,w], got {:?}", logits.shape());
        ensure!(depths.len() == logits.dim(0), "HeatmapStack", "{} depths for {} maps", depths.len(), logits.dim(0));
        let hw = logits.dim(1) * logits.dim(2);
        let mut maps = logits.clone();
        for m in maps.data_mut().chunks_mut(hw) {
            let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in m.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            m.iter_mut().for_each(|v| *v /= z);
        }
        Ok(Self { heatmaps: maps, depths, stride })
    }

    pub fn joints(&self) -> usize {
        self.heatmaps.dim(0)
    }
}

/// Expected joint positions under the heatmaps, back-projected with depth
/// `root_depth + depths[j]`.
pub fn decode_soft_argmax(stack: &HeatmapStack, cam: &Intrinsics, root_depth: f64) -> Result<JointSet> {
    let hm = &stack.heatmaps;
    ensure!(hm.ndim() == 3, "decode_soft_argmax", "heatmaps must be [J,h,w], got {:?}", hm.shape());
    let (j, h, w) = (hm.dim(0), hm.dim(1), hm.dim(2));
    ensure!(stack.depths.len() == j, "decode_soft_argmax", "{} depths for {j} maps", stack.depths.len());
    let s = stack.stride as f64;
    let mut joints = Vec::with_capacity(j);
    for (k, m) in hm.data().chunks(h * w).enumerate() {
        let total: f64 = m.iter().sum();
        ensure!(
            (total - 1.0).abs() < 1e-9 && m.iter().all(|&p| p >= 0.0),
            "decode_soft_argmax",
            "heatmap {k} is not normalized (sum {total})"
        );
        let (mut ex, mut ey) = (0.0, 0.0);
        for (i, &p) in m.iter().enumerate() {
            ex += p * (i % w) as f64;
            ey += p * (i / w) as f64;
        }
        let (u, v) = ((ex + 0.5) * s, (ey + 0.5) * s);
        joints.push(cam.back_project(u, v, root_depth + stack.depths[k]));
    }
    Ok(JointSet::new(joints))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean per-joint Euclidean distance.
pub fn mpjpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    ensure!(
        pred.len() == gt.len() && !gt.is_empty(),
        "mpjpe",
        "joint counts differ or are zero: {} vs {}",
        pred.len(),
        gt.len()
    );
    Ok(pred.joints.iter().zip(&gt.joints).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

/// [`mpjpe`] after moving both roots to the origin.
pub fn epe_root_aligned(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    ensure!(pred.len() == gt.len() && gt.len() > ROOT, "epe_root_aligned", "joint counts differ or root missing");
    let neg = |p: [f64; 3]| [-p[0], -p[1], -p[2]];
    mpjpe(&pred.translate(neg(pred.joints[ROOT])), &gt.translate(neg(gt.joints[ROOT])))
}

/// The default threshold list `0, 1, ..., 50` mm.
pub fn default_thresholds() -> Vec<f64> {
    (0..=AUC_MAX_MM).map(|t| t as f64).collect()
}

/// Mean over thresholds of the fraction of samples with error at most the
/// threshold.
pub fn auc_pck(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    ensure!(!errors.is_empty() && !thresholds.is_empty(), "auc_pck", "errors and thresholds must be non-empty");
    ensure!(thresholds.windows(2).all(|w| w[0] <= w[1]), "auc_pck", "thresholds must ascend");
    let n = errors.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .sum();
    Ok(total / thresholds.len() as f64)
}

/// Fused-pyramid heatmap and depth head.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub lateral: Vec<Linear>,
    pub conv: Conv2d,
    pub heatmap: Linear,
    pub depth: Linear,
    pub joints: usize,
}

impl PoseHead {
    pub fn new(init: &mut Init<'_>, level_widths: &[usize], width: usize, joints: usize) -> Self {
        let mut init = init.sub("head");
        let lateral = level_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Linear::new(&mut init, &format!("lateral.{i}"), w, width, true))
            .collect();
        Self {
            lateral,
            conv: Conv2d::new(&mut init, "conv", width, width, 3, 1, true),
            heatmap: Linear::new(&mut init, "heatmap", width, joints, true),
            depth: Linear::new(&mut init, "depth", width, joints, true),
            joints,
        }
    }

    /// `(logits [Nb, J, h, w], depths [Nb, J, 1, 1] in mm)` with `(h, w)` the
    /// extent of the first pyramid level.
    pub fn forward(&self, ctx: &mut Ctx<'_>, pyramid: &[Var]) -> Result<(Var, Var)> {
        ensure!(
            pyramid.len() == self.lateral.len(),
            "head_forward",
            "expected {} pyramid levels, got {}",
            self.lateral.len(),
            pyramid.len()
        );
        let base = ctx.value(pyramid[0]).shape().to_vec();
        let (h, w) = (base[2], base[3]);
        let mut fused: Option<Var> = None;
        for (lvl, proj) in pyramid.iter().zip(&self.lateral) {
            let p = proj.forward(ctx, *lvl)?;
            let p = tensor::resize_bilinear(&mut ctx.tape, p, h, w)?;
            fused = Some(match fused {
                None => p,
                Some(f) => tensor::add(&mut ctx.tape, f, p)?,
            });
        }
        let fused = fused.expect("non-empty pyramid");
        let x = self.conv.forward(ctx, fused)?;
        let x = tensor::relu(&mut ctx.tape, x);
        let logits = self.heatmap.forward(ctx, x)?;
        let pooled = tensor::global_avg_pool(&mut ctx.tape, fused)?;
        let d = self.depth.forward(ctx, pooled)?;
        Ok((logits, tensor::scale(&mut ctx.tape, d, DEPTH_SCALE)))
    }
}

/// Head hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub width: usize,
    pub joints: usize,
}

impl HeadConfig {
    pub fn for_widths(widths: &[usize; 4]) -> Self {
        Self {
            width: (2 * widths[0]).clamp(16, 128),
            joints: NUM_JOINTS,
        }
    }
}

/// Backbone plus head over one parameter store.
#[derive(Clone, Debug)]
pub struct PoseModel {
    pub backbone: Backbone,
    pub head: PoseHead,
    pub head_cfg: HeadConfig,
}

/// Raw network outputs for a batch.
pub struct PoseOutputs {
    pub logits: Var,
    pub depths: Var,
}

impl PoseModel {
    pub fn build(spec: &ArchSpec, in_channels: usize, head_cfg: HeadConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = build_backbone_into(&mut init, spec, in_channels)?;
        let levels: Vec<usize> = [0, 1, 3, 5].iter().map(|&s| spec.stage_width(s)).collect();
        let head = PoseHead::new(&mut init, &levels, head_cfg.width, head_cfg.joints);
        Ok((Self { backbone, head, head_cfg }, store))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<PoseOutputs> {
        let pyr = self.backbone.forward_pyramid(ctx, images)?;
        let (logits, depths) = self.head.forward(ctx, &pyr)?;
        Ok(PoseOutputs { logits, depths })
    }

    /// Inference on `images: [Nb, C, H, W]`, decoding with each sample's
    /// camera and ground-truth root depth.
    pub fn predict(
        &self,
        store: &ParamStore,
        images: &Tensor,
        cams: &[Intrinsics],
        root_depths: &[f64],
    ) -> Result<Vec<JointSet>> {
        let nb = images.dim(0);
        ensure!(cams.len() == nb && root_depths.len() == nb, "predict", "need one camera and root depth per image");
        let mut ctx = Ctx::new(store, false, false);
        let x = ctx.input(images.clone());
        let out = self.forward(&mut ctx, x)?;
        stacks(ctx.value(out.logits), ctx.value(out.depths))?
            .iter()
            .enumerate()
            .map(|(i, s)| decode_soft_argmax(s, &cams[i], root_depths[i]))
            .collect()
    }
}

/// Splits batched logits `[Nb, J, h, w]` and depths `[Nb, J, 1, 1]`.
pub fn stacks(logits: &Tensor, depths: &Tensor) -> Result<Vec<HeatmapStack>> {
    ensure!(logits.ndim() == 4, "stacks", "logits must be [Nb,J,h,w], got {:?}", logits.shape());
    let (nb, j, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    ensure!(depths.len() == nb * j, "stacks", "depths {:?} do not match {nb}x{j}", depths.shape());
    (0..nb)
        .map(|i| {
            let l = Tensor::new(&[j, h, w], logits.data()[i * j * h * w..(i + 1) * j * h * w].to_vec())?;
            HeatmapStack::from_logits(&l, depths.data()[i * j..(i + 1) * j].to_vec(), PYRAMID_STRIDES[0])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CAM: Intrinsics = Intrinsics { focal: 100.0, cx: 16.0, cy: 16.0 };

    fn one_hot(j: usize, h: usize, w: usize, cells: &[(usize, usize)]) -> HeatmapStack {
        let mut hm = Tensor::zeros(&[j, h, w]);
        for (k, &(x, y)) in cells.iter().enumerate() {
            hm.set(&[k, y, x], 1.0);
        }
        HeatmapStack { heatmaps: hm, depths: vec![0.0; j], stride: 4 }
    }

    #[test]
    fn one_hot_decodes_to_cell_center() {
        let s = one_hot(1, 8, 8, &[(3, 5)]);
        let p = decode_soft_argmax(&s, &CAM, 400.0).unwrap();
        assert_eq!(CAM.project(p.joints[0]), (14.0, 22.0));
    }

    #[test]
    fn two_peaks_decode_to_midpoint() {
        let mut s = one_hot(1, 8, 8, &[(1, 2)]);
        s.heatmaps.set(&[0, 2, 1], 0.5);
        s.heatmaps.set(&[0, 6, 5], 0.5);
        let p = decode_soft_argmax(&s, &CAM, 400.0).unwrap();
        let (u, v) = CAM.project(p.joints[0]);
        assert!((u - 14.0).abs() < 1e-12 && (v - 18.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_map_is_rejected() {
        let mut s = one_hot(1, 4, 4, &[(0, 0)]);
        s.heatmaps.set(&[0, 1, 1], 0.5);
        assert!(decode_soft_argmax(&s, &CAM, 400.0).is_err());
    }

    #[test]
    fn soft_argmax_matches_expectation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::uniform(&[2, 5, 6], -2.0, 2.0, &mut rng);
        let s = HeatmapStack::from_logits(&logits, vec![3.0, -7.0], 4).unwrap();
        let p = decode_soft_argmax(&s, &CAM, 300.0).unwrap();
        for k in 0..2 {
            let (mut u, mut v, mut z) = (0.0, 0.0, 0.0);
            for y in 0..5 {
                for x in 0..6 {
                    let e: f64 = (0..30).map(|i| logits.data()[k * 30 + i].exp()).sum();
                    let pr = logits.at(&[k, y, x]).exp() / e;
                    u += pr * (4.0 * x as f64 + 2.0);
                    v += pr * (4.0 * y as f64 + 2.0);
                    z += pr;
                }
            }
            assert!((z - 1.0).abs() < 1e-12);
            let (pu, pv) = CAM.project(p.joints[k]);
            assert!((pu - u).abs() < 1e-12 && (pv - v).abs() < 1e-12);
            assert!((p.joints[k][2] - (300.0 + s.depths[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_examples() {
        let a = JointSet::new(vec![[0.0, 0.0, 0.0]]);
        let b = JointSet::new(vec![[3.0, 0.0, 4.0]]);
        assert_eq!(mpjpe(&a, &b).unwrap(), 5.0);
        let c = JointSet::new(vec![[0.0; 3], [0.0; 3]]);
        let d = JointSet::new(vec![[2.0, 0.0, 0.0], [0.0, 4.0, 0.0]]);
        assert_eq!(mpjpe(&c, &d).unwrap(), 3.0);
        assert!(mpjpe(&a, &c).is_err());
        assert_eq!(auc_pck(&[0.0, 0.0], &default_thresholds()).unwrap(), 1.0);
        assert_eq!(auc_pck(&[51.0, 80.0], &default_thresholds()).unwrap(), 0.0);
        assert!(auc_pck(&[], &default_thresholds()).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_maps_and_bias_depth() {
        let spec = ArchSpec::preset("CCGGGG", crate::backbone::Preset::Tiny).unwrap();
        let (m, mut store) = PoseModel::build(&spec, 3, HeadConfig { width: 8, joints: 21 }, 0).unwrap();
        for l in [&m.head.heatmap, &m.head.depth] {
            store.get_mut(l.weight).data_mut().fill(0.0);
        }
        store.get_mut(m.head.depth.bias.unwrap()).data_mut().fill(0.25);
        let img = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut ctx = Ctx::new(&store, false, false);
        let x = ctx.input(img);
        let out = m.forward(&mut ctx, x).unwrap();
        let st = stacks(ctx.value(out.logits), ctx.value(out.depths)).unwrap();
        assert_eq!(st[0].joints(), 21);
        assert!(st[0].heatmaps.data().iter().all(|&p| (p - 1.0 / 64.0).abs() < 1e-15));
        assert!(st[0].depths.iter().all(|&d| (d - 25.0).abs() < 1e-12));
    }

    fn joint_set(n: usize) -> impl Strategy<Value = JointSet> {
        prop::collection::vec(prop::array::uniform3(-200.0..200.0f64), n).prop_map(JointSet::new)
    }

    proptest! {
        #[test]
        fn mpjpe_symmetry_and_translation((a, b) in (1usize..8).prop_flat_map(|n| (joint_set(n), joint_set(n))),
                                          t in prop::array::uniform3(-50.0..50.0f64)) {
            let ab = mpjpe(&a, &b).unwrap();
            prop_assert_eq!(ab, mpjpe(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
            let e = epe_root_aligned(&a, &b).unwrap();
            prop_assert!((epe_root_aligned(&a.translate(t), &b).unwrap() - e).abs() < 1e-9);
            let moved = mpjpe(&a.translate(t), &a).unwrap();
            let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            prop_assert!((moved - norm).abs() < 1e-9);
        }

        #[test]
        fn auc_non_increasing_in_a_sample(errs in prop::collection::vec(0.0..80.0f64, 1..20),
                                          idx in 0usize..20, bump in 0.0..30.0f64) {
            let th = default_thresholds();
            let before = auc_pck(&errs, &th).unwrap();
            let mut worse = errs.clone();
            let i = idx % errs.len();
            worse[i] += bump;
            prop_assert!(auc_pck(&worse, &th).unwrap() <= before);
        }

        #[test]
        fn decode_is_shift_invariant(c in -20.0..20.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::uniform(&[3, 4, 5], -3.0, 3.0, &mut rng);
            let a = HeatmapStack::from_logits(&logits, vec![0.0; 3], 4).unwrap();
            let b = HeatmapStack::from_logits(&logits.map(|v| v + c), vec![0.0; 3], 4).unwrap();
            let pa = decode_soft_argmax(&a, &CAM, 400.0).unwrap();
            let pb = decode_soft_argmax(&b, &CAM, 400.0).unwrap();
            prop_assert!(mpjpe(&pa, &pb).unwrap() < 1e-9);
        }
    }
}
