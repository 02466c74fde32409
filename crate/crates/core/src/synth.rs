//! Procedural hand images with exact 3D joint labels.
//!
//! A 21-joint kinematic hand (wrist, then four joints per finger from thumb
//! to pinky) is posed with random flexion, splay and global rotation,
//! placed in front of a pinhole camera and rasterized: bones as anti-aliased
//! capsules, joints as Gaussian blobs, over a noisy background with random
//! occluding rectangles.
//!
//! Every stored number is exactly representable as `f32`, so writing and
//! reading a dataset is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::seeded_rng;
use crate::par;
use crate::pose::{Intrinsics, JointSet, NUM_JOINTS};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const MAX_TRIES: usize = 100;
pub const MANIFEST: &str = "manifest";
pub const IMAGES_BIN: &str = "images.bin";
pub const JOINTS_BIN: &str = "joints.bin";
pub const FORMAT_NAME: &str = "dfmamba-hands";
pub const FORMAT_VERSION: u32 = 1;
/// `f32` values per sample in `joints.bin`: 21 joints × 3, then focal, cx, cy.
pub const JOINT_RECORD: usize = NUM_JOINTS * 3 + 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Image side in pixels.
    pub size: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Wrist depth range in millimeters.
    pub depth_range: (f64, f64),
    /// Multiplier applied to every bone length.
    pub bone_scale: (f64, f64),
    /// Per-joint flexion range in degrees.
    pub flexion_deg: (f64, f64),
    pub splay_deg: f64,
    /// Global rotation limits in degrees: in-plane, then out-of-plane.
    pub roll_deg: f64,
    pub tilt_deg: f64,
    pub max_occluders: usize,
    pub noise: f64,
    /// Minimum distance of every projected joint from the image border.
    pub margin_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            focal: 150.0,
            depth_range: (380.0, 520.0),
            bone_scale: (0.85, 1.15),
            flexion_deg: (0.0, 70.0),
            splay_deg: 8.0,
            roll_deg: 45.0,
            tilt_deg: 35.0,
            max_occluders: 2,
            noise: 0.04,
            margin_px: 2.0,
        }
    }
}

impl SynthConfig {
    /// Defaults for a `size × size` image, with the focal length scaled so
    /// the hand covers the same fraction of the frame.
    pub fn for_size(size: usize) -> Self {
        let d = Self::default();
        Self {
            size,
            focal: d.focal * size as f64 / d.size as f64,
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub joints: JointSet,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

/// `(base x, base y, direction angle in degrees, segment lengths)` per finger
/// in the hand frame, with the fingers pointing towards `-y`.
const FINGERS: [((f64, f64), f64, [f64; 3]); 5] = [
    ((-22.0, -18.0), -50.0, [38.0, 32.0, 27.0]),
    ((-24.0, -82.0), -8.0, [42.0, 25.0, 21.0]),
    ((-5.0, -86.0), 0.0, [46.0, 28.0, 23.0]),
    ((13.0, -82.0), 8.0, [42.0, 27.0, 22.0]),
    ((29.0, -72.0), 16.0, [33.0, 20.0, 19.0]),
];

const FINGER_COLORS: [[f64; 3]; 5] = [
    [0.95, 0.35, 0.25],
    [0.95, 0.85, 0.2],
    [0.3, 0.85, 0.35],
    [0.25, 0.55, 0.95],
    [0.8, 0.35, 0.9],
];
const PALM_COLOR: [f64; 3] = [0.85, 0.75, 0.65];

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn rot(axis: usize, a: f64) -> [[f64; 3]; 3] {
    let (s, c) = libm::sincos(a);
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn apply(m: [[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

/// Hand-frame joints of a randomly posed hand.
fn pose_hand(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<[f64; 3]> {
    let scale = rng.random_range(cfg.bone_scale.0..=cfg.bone_scale.1);
    let mut joints = vec![[0.0; 3]];
    for (f, &((bx, by), dir, lens)) in FINGERS.iter().enumerate() {
        let splay = (dir + rng.random_range(-cfg.splay_deg..=cfg.splay_deg)).to_radians();
        // In-plane heading and the unit vector the finger bends towards.
        let heading = [libm::sin(splay), -libm::cos(splay), 0.0];
        let bend = if f == 0 { [0.6, 0.0, -0.8] } else { [0.0, 0.0, -1.0] };
        let mut p = [bx * scale, by * scale, 0.0];
        joints.push(p);
        let mut flex = 0.0;
        for (s, len) in lens.iter().enumerate() {
            let range = cfg.flexion_deg.0..=cfg.flexion_deg.1;
            flex += rng.random_range(range).to_radians() * if s == 0 { 0.6 } else { 1.0 };
            let (sn, cs) = libm::sincos(flex);
            let d = [0, 1, 2].map(|i| cs * heading[i] + sn * bend[i]);
            p = [0, 1, 2].map(|i| p[i] + len * scale * d[i]);
            joints.push(p);
        }
    }
    joints
}

fn try_sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Option<(Vec<[f64; 3]>, Intrinsics)> {
    let local = pose_hand(rng, cfg);
    let r = matmul(
        rot(2, rng.random_range(-cfg.roll_deg..=cfg.roll_deg).to_radians()),
        matmul(
            rot(0, rng.random_range(-cfg.tilt_deg..=cfg.tilt_deg).to_radians()),
            rot(1, rng.random_range(-cfg.tilt_deg..=cfg.tilt_deg).to_radians()),
        ),
    );
    let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
    // Centre the hand's bounding box near the optical axis, with jitter.
    let rotated: Vec<[f64; 3]> = local.iter().map(|&p| apply(r, p)).collect();
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &rotated {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    // Up to 10% of the frame width, in millimeters at depth z.
    let jitter = 0.1 * cfg.size as f64 * z / cfg.focal;
    let t = [
        -(lo[0] + hi[0]) / 2.0 + rng.random_range(-jitter..=jitter),
        -(lo[1] + hi[1]) / 2.0 + rng.random_range(-jitter..=jitter),
        z,
    ];
    let half = cfg.size as f64 / 2.0;
    let cam = Intrinsics {
        focal: f32r(cfg.focal),
        cx: f32r(half),
        cy: f32r(half),
    };
    let joints: Vec<[f64; 3]> = rotated.iter().map(|p| [0, 1, 2].map(|i| f32r(p[i] + t[i]))).collect();
    let lo_px = cfg.margin_px;
    let hi_px = cfg.size as f64 - cfg.margin_px;
    let ok = joints.iter().all(|&p| {
        let (u, v) = cam.project(p);
        p[2] > 1.0 && u >= lo_px && u < hi_px && v >= lo_px && v < hi_px
    });
    ok.then_some((joints, cam))
}

/// Bone list as joint index pairs.
pub fn bones() -> Vec<(usize, usize)> {
    let mut b = Vec::with_capacity(20);
    for f in 0..5 {
        let base = 1 + 4 * f;
        b.push((0, base));
        for k in 0..3 {
            b.push((base + k, base + k + 1));
        }
    }
    b
}

fn finger_of(joint: usize) -> Option<usize> {
    (joint > 0).then(|| (joint - 1) / 4)
}

struct Canvas {
    s: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let s = self.s;
        for (c, col) in color.iter().enumerate() {
            let v = &mut self.px[c * s * s + y * s + x];
            *v = *v * (1.0 - alpha) + col * alpha;
        }
    }

    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, color: [f64; 3]) {
        let s = self.s as f64;
        let x0 = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0) + radius + 1.0).ceil().min(s - 1.0) as usize;
        let y0 = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
        let y1 = (a.1.max(b.1) + radius + 1.0).ceil().min(s - 1.0) as usize;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let d = (qx * qx + qy * qy).sqrt();
                // One-pixel linear ramp at the edge.
                let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn blob(&mut self, c: (f64, f64), sigma: f64, color: [f64; 3]) {
        let s = self.s as f64;
        let r = 3.0 * sigma;
        let x0 = (c.0 - r).floor().max(0.0) as usize;
        let x1 = (c.0 + r).ceil().min(s - 1.0) as usize;
        let y0 = (c.1 - r).floor().max(0.0) as usize;
        let y1 = (c.1 + r).ceil().min(s - 1.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (ex, ey) = (x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1);
                let a = libm::exp(-(ex * ex + ey * ey) / (2.0 * sigma * sigma));
                if a > 1e-3 {
                    self.blend(x, y, color, a);
                }
            }
        }
    }
}

fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig, joints: &[[f64; 3]], cam: &Intrinsics) -> Tensor {
    let s = cfg.size;
    let mut cv = Canvas { s, px: vec![0.0; CHANNELS * s * s] };
    // Smooth random gradient background.
    let base: [f64; 3] = [0; 3].map(|_| rng.random_range(0.05..0.4));
    let grad: [(f64, f64); 3] = [0; 3].map(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
    for c in 0..CHANNELS {
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64 / s as f64 - 0.5, y as f64 / s as f64 - 0.5);
                cv.px[c * s * s + y * s + x] = base[c] + grad[c].0 * fx + grad[c].1 * fy;
            }
        }
    }
    let uv: Vec<(f64, f64)> = joints.iter().map(|&p| cam.project(p)).collect();
    let px_per_mm = |z: f64| cam.focal / z;
    for (a, b) in bones() {
        let z = 0.5 * (joints[a][2] + joints[b][2]);
        let color = finger_of(b).map_or(PALM_COLOR, |f| FINGER_COLORS[f]);
        let color = if a == 0 { PALM_COLOR } else { color };
        cv.capsule(uv[a], uv[b], (7.0 * px_per_mm(z)).max(1.0), color);
    }
    for (j, &c) in uv.iter().enumerate() {
        let color = finger_of(j).map_or([1.0; 3], |f| FINGER_COLORS[f].map(|v| 0.5 + 0.5 * v));
        cv.blob(c, (4.0 * px_per_mm(joints[j][2])).max(0.8), color);
    }
    for _ in 0..rng.random_range(0..=cfg.max_occluders) {
        let w = rng.random_range(0.08..0.2) * s as f64;
        let h = rng.random_range(0.08..0.2) * s as f64;
        let x0 = rng.random_range(0.0..s as f64 - w);
        let y0 = rng.random_range(0.0..s as f64 - h);
        let color: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..1.0));
        for y in (y0 as usize)..((y0 + h) as usize).min(s) {
            for x in (x0 as usize)..((x0 + w) as usize).min(s) {
                cv.blend(x, y, color, 0.85);
            }
        }
    }
    let data = cv
        .px
        .into_iter()
        .map(|v| f32r((v + cfg.noise * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_parts(vec![CHANNELS, s, s], data)
}

/// Deterministic sample for `seed`, retrying poses that leave the frame.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SkeletonSample> {
    ensure!(cfg.size >= 8 && cfg.size % 4 == 0, "generate_sample", "image side {} must be a multiple of 4, at least 8", cfg.size);
    let mut rng = seeded_rng(seed);
    for _ in 0..MAX_TRIES {
        if let Some((joints, cam)) = try_sample(&mut rng, cfg) {
            let image = render(&mut rng, cfg, &joints, &cam);
            return Ok(SkeletonSample {
                image,
                joints: JointSet::new(joints),
                intrinsics: cam,
                seed,
            });
        }
    }
    Err(Error::Generation {
        tries: MAX_TRIES,
        msg: format!("seed {seed}: hand never fit inside the {}px frame", cfg.size),
    })
}

/// Samples for seeds `first_seed .. first_seed + count`, generated in parallel.
pub fn generate_dataset(first_seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SkeletonSample>> {
    par::map(count, |i| generate_sample(first_seed + i as u64, cfg))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub channels: usize,
    pub size: usize,
    pub joints: usize,
    pub dtype: String,
    pub images: BlobInfo,
    pub joint_records: BlobInfo,
    pub seeds: Vec<u64>,
    pub config: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub file: String,
    pub shape: Vec<usize>,
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes `manifest`, `images.bin` and `joints.bin` into `dir`.
pub fn write_dataset(samples: &[SkeletonSample], dir: &Path, cfg: Option<&SynthConfig>) -> Result<()> {
    ensure!(!samples.is_empty(), "write_dataset", "no samples to write");
    let s = samples[0].image.dim(1);
    ensure!(
        samples.iter().all(|x| x.image.shape() == [CHANNELS, s, s] && x.joints.len() == NUM_JOINTS),
        "write_dataset",
        "samples must share the image shape [{CHANNELS},{s},{s}] and have {NUM_JOINTS} joints"
    );
    fs::create_dir_all(dir)?;
    let n = samples.len();
    let mut img = Vec::with_capacity(n * CHANNELS * s * s * 4);
    let mut jnt = Vec::with_capacity(n * JOINT_RECORD * 4);
    for x in samples {
        put_f32s(&mut img, x.image.data().iter().copied());
        put_f32s(&mut jnt, x.joints.joints.iter().flat_map(|p| p.iter().copied()));
        put_f32s(&mut jnt, [x.intrinsics.focal, x.intrinsics.cx, x.intrinsics.cy]);
    }
    fs::write(dir.join(IMAGES_BIN), img)?;
    fs::write(dir.join(JOINTS_BIN), jnt)?;
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        count: n,
        channels: CHANNELS,
        size: s,
        joints: NUM_JOINTS,
        dtype: "f32le".into(),
        images: BlobInfo { file: IMAGES_BIN.into(), shape: vec![n, CHANNELS, s, s] },
        joint_records: BlobInfo { file: JOINTS_BIN.into(), shape: vec![n, JOINT_RECORD] },
        seeds: samples.iter().map(|x| x.seed).collect(),
        config: cfg.cloned(),
    };
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn format_err(path: PathBuf, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { path, offset, msg: msg.into() }
}

fn read_blob(path: PathBuf, expect_values: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(&path)?;
    let want = expect_values as u64 * 4;
    if bytes.len() as u64 != want {
        let offset = want.min(bytes.len() as u64);
        return Err(format_err(path, offset, format!("expected {want} bytes, found {}", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| {
        let offset: usize = text.lines().take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum::<usize>() + e.column().saturating_sub(1);
        format_err(path.clone(), offset as u64, e.to_string())
    })?;
    let check = |ok: bool, field: &str, msg: String| -> Result<()> {
        if ok {
            Ok(())
        } else {
            let offset = text.find(&format!("\"{field}\"")).unwrap_or(0) as u64;
            Err(format_err(path.clone(), offset, msg))
        }
    };
    check(m.format == FORMAT_NAME, "format", format!("unknown format {:?}", m.format))?;
    check(m.version == FORMAT_VERSION, "version", format!("unsupported version {}", m.version))?;
    check(m.joints == NUM_JOINTS, "joints", format!("joint count {} does not match {NUM_JOINTS}", m.joints))?;
    check(m.channels == CHANNELS, "channels", format!("channel count {} does not match {CHANNELS}", m.channels))?;
    check(m.dtype == "f32le", "dtype", format!("unsupported dtype {:?}", m.dtype))?;
    check(m.seeds.len() == m.count, "seeds", format!("{} seeds for {} samples", m.seeds.len(), m.count))?;
    check(
        m.images.shape == [m.count, m.channels, m.size, m.size],
        "images",
        format!("image shape {:?} disagrees with count/size", m.images.shape),
    )?;
    check(
        m.joint_records.shape == [m.count, JOINT_RECORD],
        "joint_records",
        format!("joint record shape {:?}, expected [{}, {JOINT_RECORD}]", m.joint_records.shape, m.count),
    )?;
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SkeletonSample>> {
    let m = read_manifest(dir)?;
    let s = m.size;
    let img = read_blob(dir.join(&m.images.file), m.count * CHANNELS * s * s)?;
    let jnt = read_blob(dir.join(&m.joint_records.file), m.count * JOINT_RECORD)?;
    let mut out = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let r = &jnt[i * JOINT_RECORD..(i + 1) * JOINT_RECORD];
        let joints = (0..NUM_JOINTS).map(|j| [r[3 * j], r[3 * j + 1], r[3 * j + 2]]).collect();
        let k = NUM_JOINTS * 3;
        out.push(SkeletonSample {
            image: Tensor::from_parts(vec![CHANNELS, s, s], img[i * CHANNELS * s * s..(i + 1) * CHANNELS * s * s].to_vec()),
            joints: JointSet::new(joints),
            intrinsics: Intrinsics { focal: r[k], cx: r[k + 1], cy: r[k + 2] },
            seed: m.seeds[i],
        });
    }
    Ok(out)
}

/// Stacks samples into `[Nb, 3, S, S]`.
pub fn batch_images(samples: &[&SkeletonSample]) -> Result<Tensor> {
    ensure!(!samples.is_empty(), "batch_images", "empty batch");
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        ensure!(s.image.shape() == shape.as_slice(), "batch_images", "mixed image shapes");
        data.extend_from_slice(s.image.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}
