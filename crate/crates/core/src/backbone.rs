//! Six-stage backbone assembled from an architecture string over `{C,D,G}`.
//!
//! Layout: `stem → S1 → ds → S2 → ds → S3 → S4 → ds → S5 → S6`, with pyramid
//! features taken after stages 1, 2, 4 and 6 (strides 4, 8, 16, 32), each
//! passed through layer normalization and a linear projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BasicBlock, Block, ConvStem, Downsample, Ffn, MixerBlock, MixerConfig, MixerKind};
use crate::dssm::AnchorVariant;
use crate::error::{ensure, Error, Result};
use crate::nn::{seeded_rng, Ctx, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

pub const STAGES: usize = 6;
/// Stages whose outputs form the pyramid (0-based).
pub const PYRAMID_STAGES: [usize; 4] = [0, 1, 3, 5];
/// Stages followed by a downsampling layer (0-based).
pub const DOWNSAMPLE_AFTER: [usize; 3] = [0, 1, 3];
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    /// Basic convolution blocks.
    C,
    /// DSSM block + FFN pairs.
    D,
    /// Gated convolution blocks.
    G,
}

impl StageKind {
    pub fn symbol(self) -> char {
        match self {
            Self::C => 'C',
            Self::D => 'D',
            Self::G => 'G',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    Tiny,
    Default,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "default" => Ok(Self::Default),
            _ => Err(Error::contract("Preset", format!("unknown preset {s:?}, expected tiny or default"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Default => "default",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kinds: [StageKind; STAGES],
    pub depths: [usize; STAGES],
    /// Widths of the four resolution levels `/4, /8, /16, /32`.
    pub widths: [usize; 4],
    pub mixer: MixerConfig,
}

pub const DEFAULT_ARCH: &str = "CCDGDG";
pub const DEFAULT_DEPTHS: [usize; STAGES] = [3, 3, 5, 5, 2, 1];
pub const DEFAULT_WIDTHS: [usize; 4] = [80, 160, 320, 640];
pub const TINY_DEPTHS: [usize; STAGES] = [1, 1, 2, 2, 1, 1];
pub const TINY_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Parses six symbols over `{C, D, G}` into a spec with default depths and
/// widths.
pub fn parse_arch(s: &str) -> Result<ArchSpec> {
    let err = |index: usize, msg: String| Error::ArchParse {
        input: s.to_string(),
        index,
        msg,
    };
    let mut kinds = [StageKind::C; STAGES];
    let mut n = 0;
    for (i, ch) in s.chars().enumerate() {
        if i >= STAGES {
            return Err(err(i, format!("expected {STAGES} stages, found more")));
        }
        kinds[i] = match ch {
            'C' => StageKind::C,
            'D' => StageKind::D,
            'G' => StageKind::G,
            other => return Err(err(i, format!("invalid stage symbol {other:?}"))),
        };
        n += 1;
    }
    if n < STAGES {
        return Err(err(n, format!("expected {STAGES} stages, found {n}")));
    }
    Ok(ArchSpec {
        kinds,
        depths: DEFAULT_DEPTHS,
        widths: DEFAULT_WIDTHS,
        mixer: MixerConfig::default(),
    })
}

impl ArchSpec {
    pub fn preset(arch: &str, preset: Preset) -> Result<Self> {
        let mut spec = parse_arch(arch)?;
        if preset == Preset::Tiny {
            spec.depths = TINY_DEPTHS;
            spec.widths = TINY_WIDTHS;
            spec.mixer.state_size = 4;
        }
        Ok(spec)
    }

    pub fn with_anchors(mut self, anchors: AnchorVariant) -> Self {
        self.mixer.anchors = anchors;
        self
    }

    pub fn arch_string(&self) -> String {
        self.kinds.iter().map(|k| k.symbol()).collect()
    }

    /// Width of stage `s` (0-based).
    pub fn stage_width(&self, s: usize) -> usize {
        self.widths[[0, 1, 2, 2, 3, 3][s]]
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.depths.iter().all(|&d| d > 0), "ArchSpec", "stage depths must be positive, got {:?}", self.depths);
        ensure!(self.widths.iter().all(|&w| w > 0), "ArchSpec", "widths must be positive, got {:?}", self.widths);
        ensure!(self.mixer.state_size > 0, "ArchSpec", "state size must be positive");
        Ok(())
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} depths={:?} widths={:?} N={} anchors={} selective={}",
            self.arch_string(),
            self.depths,
            self.widths,
            self.mixer.state_size,
            self.mixer.anchors,
            self.mixer.selective
        )
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: ArchSpec,
    pub in_channels: usize,
    pub stem: ConvStem,
    pub stages: Vec<Vec<Block>>,
    pub downsamples: Vec<Downsample>,
    pub necks: Vec<(LayerNorm, Linear)>,
}

/// Registers every backbone parameter through `init`.
pub fn build_backbone_into(init: &mut Init<'_>, spec: &ArchSpec, in_channels: usize) -> Result<Backbone> {
    spec.validate()?;
    ensure!(in_channels > 0, "build_backbone", "input needs at least one channel");
    let mut init = init.sub("backbone");
    let stem = ConvStem::new(&mut init, in_channels, spec.widths[0]);
    let mut stages = Vec::with_capacity(STAGES);
    let mut downsamples = Vec::new();
    for s in 0..STAGES {
        let w = spec.stage_width(s);
        let mut si = init.sub(format!("stages.{s}"));
        let blocks = (0..spec.depths[s])
            .map(|b| {
                let mut bi = si.sub(b);
                match spec.kinds[s] {
                    StageKind::C => Block::Conv(BasicBlock::new(&mut bi, w)),
                    StageKind::G => Block::Gated(MixerBlock::new(&mut bi, w, MixerKind::Gated, &spec.mixer)),
                    StageKind::D => Block::Dssm {
                        mixer: MixerBlock::new(&mut bi.sub("mixer"), w, MixerKind::Dssm, &spec.mixer),
                        ffn: Ffn::new(&mut bi.sub("ffn"), w),
                    },
                }
            })
            .collect();
        stages.push(blocks);
        if DOWNSAMPLE_AFTER.contains(&s) {
            let next = spec.stage_width(s + 1);
            downsamples.push(Downsample::new(&mut init.sub(format!("downsample.{s}")), w, next));
        }
    }
    let necks = PYRAMID_STAGES
        .iter()
        .enumerate()
        .map(|(level, &s)| {
            let w = spec.stage_width(s);
            let mut ni = init.sub(format!("neck.{level}"));
            (LayerNorm::new(&mut ni, "norm", w), Linear::new(&mut ni, "proj", w, w, true))
        })
        .collect();
    Ok(Backbone {
        spec: spec.clone(),
        in_channels,
        stem,
        stages,
        downsamples,
        necks,
    })
}

/// Builds a backbone with parameters drawn deterministically from `seed`.
pub fn build_backbone(spec: &ArchSpec, in_channels: usize, seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let bb = build_backbone_into(&mut Init::new(&mut store, &mut rng), spec, in_channels)?;
    Ok((bb, store))
}

/// Number of learnable scalars in `store`.
pub fn count_params(store: &ParamStore) -> usize {
    store.num_learnable()
}

impl Backbone {
    /// Four pyramid maps `[Nb, w_l, H/s_l, W/s_l]` for `image: [Nb, C0, H, W]`.
    pub fn forward_pyramid(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Vec<Var>> {
        let shape = ctx.value(image).shape().to_vec();
        ensure!(
            shape.len() == 4 && shape[1] == self.in_channels,
            "forward_pyramid",
            "expected [N,{},H,W], got {shape:?}",
            self.in_channels
        );
        ensure!(
            shape[2] % 32 == 0 && shape[3] % 32 == 0 && shape[2] > 0 && shape[3] > 0,
            "forward_pyramid",
            "spatial extents {}x{} must be positive multiples of 32",
            shape[2],
            shape[3]
        );
        let mut x = self.stem.forward(ctx, image)?;
        let mut taps = Vec::with_capacity(4);
        let mut ds = self.downsamples.iter();
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(ctx, x)?;
            }
            if PYRAMID_STAGES.contains(&s) {
                taps.push(x);
            }
            if DOWNSAMPLE_AFTER.contains(&s) {
                x = ds.next().expect("downsample per schedule").forward(ctx, x)?;
            }
        }
        taps.into_iter()
            .zip(&self.necks)
            .map(|(t, (norm, proj))| {
                let y = norm.forward(ctx, t)?;
                proj.forward(ctx, y)
            })
            .collect()
    }
}

/// Evaluated pyramid maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub maps: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape().to_vec()).collect()
    }

    /// Concatenation of every map's values, level by level.
    pub fn flatten(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// Gradient-free, inference-mode pyramid of `image`.
pub fn forward_pyramid(bb: &Backbone, store: &ParamStore, image: &Tensor) -> Result<PyramidFeatures> {
    let mut ctx = Ctx::new(store, false, false);
    let x = ctx.input(image.clone());
    let vars = bb.forward_pyramid(&mut ctx, x)?;
    Ok(PyramidFeatures {
        maps: vars.into_iter().map(|v| ctx.value(v).clone()).collect(),
    })
}

/// Output shape `[C, H, W]` of every stage for a square `input` image.
pub fn stage_shapes(spec: &ArchSpec, input: usize) -> Result<Vec<[usize; 3]>> {
    ensure!(input > 0 && input % 32 == 0, "stage_shapes", "input side {input} must be a positive multiple of 32");
    let mut side = input / 4;
    let mut out = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        out.push([spec.stage_width(s), side, side]);
        if DOWNSAMPLE_AFTER.contains(&s) {
            side /= 2;
        }
    }
    Ok(out)
}

/// Inference throughput of the pyramid forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub arch: String,
    pub input: usize,
    pub batch: usize,
    pub iters: usize,
    pub params: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub images_per_sec: f64,
}

/// Times `iters` inference-mode forward passes on a fixed random batch
/// after one warm-up pass.
pub fn bench_forward(spec: &ArchSpec, input: usize, batch: usize, iters: usize, seed: u64) -> Result<BenchResult> {
    ensure!(iters >= 1 && batch >= 1, "bench_forward", "iters and batch must be at least 1");
    let (bb, store) = build_backbone(spec, 3, seed)?;
    let image = Tensor::uniform(&[batch, 3, input, input], -1.0, 1.0, &mut seeded_rng(seed ^ 0x5eed));
    forward_pyramid(&bb, &store, &image)?;
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = std::time::Instant::now();
        std::hint::black_box(forward_pyramid(&bb, &store, &image)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    Ok(BenchResult {
        arch: spec.arch_string(),
        input,
        batch,
        iters,
        params: count_params(&store),
        threads: crate::par::threads(),
        mean_ms,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        images_per_sec: batch as f64 * 1e3 / mean_ms,
    })
}
