//! Loss, Adam, the training loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ArchSpec, Preset};
use crate::dssm::AnchorVariant;
use crate::error::{ensure, Error, Result};
use crate::nn::{apply_bn_updates, seeded_rng, Ctx, ParamKind, ParamStore};
use crate::pose::{
    auc_pck, default_thresholds, epe_root_aligned, mpjpe, HeadConfig, Intrinsics, JointSet, PoseModel, PoseOutputs,
    HEATMAP_STRIDE,
};
use crate::synth::{batch_images, SkeletonSample, CHANNELS};
use crate::tensor::{self, Tensor, Var};

/// Spread of the heatmap target in grid cells.
pub const TARGET_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: String,
    pub preset: Preset,
    pub anchors: AnchorVariant,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub heatmap_weight: f64,
    /// Weight of the L1 depth term, per millimeter.
    pub depth_weight: f64,
    /// Number of samples at the end of the dataset held out for evaluation.
    pub holdout: usize,
    /// Keep every offset predictor at its zero initialization.
    pub freeze_offsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: crate::backbone::DEFAULT_ARCH.into(),
            preset: Preset::Tiny,
            anchors: AnchorVariant::K9,
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            heatmap_weight: 1.0,
            depth_weight: 0.02,
            holdout: 100,
            freeze_offsets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "TrainConfig", "lr must be positive, got {}", self.lr);
        ensure!(self.epochs >= 1, "TrainConfig", "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "TrainConfig", "batch size must be at least 1");
        ensure!(self.weight_decay >= 0.0, "TrainConfig", "weight decay must be non-negative");
        Ok(())
    }

    pub fn spec(&self) -> Result<ArchSpec> {
        Ok(ArchSpec::preset(&self.arch, self.preset)?.with_anchors(self.anchors))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let spec = self.spec()?;
        Ok(ModelConfig {
            head: HeadConfig::for_widths(&spec.widths),
            spec,
            in_channels: CHANNELS,
        })
    }
}

/// Everything that determines the parameter layout of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spec: ArchSpec,
    pub head: HeadConfig,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn build(&self, seed: u64) -> Result<(PoseModel, ParamStore)> {
        PoseModel::build(&self.spec, self.in_channels, self.head, seed)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Normalized Gaussian over an `h × w` grid centred on pixel `(u, v)`.
pub fn gaussian_target(u: f64, v: f64, h: usize, w: usize, stride: usize, sigma: f64) -> Result<Vec<f64>> {
    let gx = u / stride as f64 - 0.5;
    let gy = v / stride as f64 - 0.5;
    ensure!(
        gx >= -0.5 && gx < w as f64 - 0.5 && gy >= -0.5 && gy < h as f64 - 0.5,
        "gaussian_target",
        "point ({u}, {v}) falls outside the {h}x{w} grid"
    );
    let mut t: Vec<f64> = (0..h * w)
        .map(|i| {
            let (dx, dy) = ((i % w) as f64 - gx, (i / w) as f64 - gy);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= z);
    Ok(t)
}

/// Heatmap targets `[Nb, J, h, w]` and root-relative depths `[Nb, J, 1, 1]`.
pub fn targets(samples: &[&SkeletonSample], h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let j = samples[0].joints.len();
    let mut hm = Vec::with_capacity(samples.len() * j * h * w);
    let mut dz = Vec::with_capacity(samples.len() * j);
    for s in samples {
        for &p in &s.joints.joints {
            let (u, v) = s.intrinsics.project(p);
            hm.extend(gaussian_target(u, v, h, w, HEATMAP_STRIDE, TARGET_SIGMA)?);
        }
        dz.extend(s.joints.relative_depths());
    }
    Ok((
        Tensor::new(&[samples.len(), j, h, w], hm)?,
        Tensor::new(&[samples.len(), j, 1, 1], dz)?,
    ))
}

/// `heatmap_weight · CE(heatmaps, Gaussian targets) + depth_weight · L1(depth)`.
pub fn compute_loss(
    ctx: &mut Ctx<'_>,
    out: &PoseOutputs,
    hm_target: &Tensor,
    depth_target: &Tensor,
    heatmap_weight: f64,
    depth_weight: f64,
) -> Result<Var> {
    let ce = tensor::softmax_cross_entropy(&mut ctx.tape, out.logits, hm_target)?;
    let l1 = tensor::l1_loss(&mut ctx.tape, out.depths, depth_target)?;
    let a = tensor::scale(&mut ctx.tape, ce, heatmap_weight);
    let b = tensor::scale(&mut ctx.tape, l1, depth_weight);
    tensor::add(&mut ctx.tape, a, b)
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every learnable, unfrozen entry. Entries without a
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        ensure!(grads.len() == store.len(), "adam_step", "{} gradients for {} parameters", grads.len(), store.len());
        for (id, p) in store.iter() {
            if let Some(g) = &grads[id.index()] {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {} at element {i}", p.name),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.param(id);
            if p.kind != ParamKind::Learnable || p.frozen {
                continue;
            }
            let k = id.index();
            let g = grads[k].as_deref();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let x = store.get_mut(id).data_mut();
            for i in 0..x.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                x[i] -= self.lr * (update + self.weight_decay * x[i]);
            }
        }
        Ok(())
    }
}

/// Held-out metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mpjpe: f64,
    pub epe: f64,
    pub auc: f64,
    pub per_sample_mpjpe: Vec<f64>,
}

/// Inference-mode evaluation in batches of `batch`.
pub fn evaluate(model: &PoseModel, store: &ParamStore, samples: &[SkeletonSample], batch: usize) -> Result<EvalReport> {
    ensure!(!samples.is_empty(), "evaluate", "no samples");
    let mut errs = Vec::with_capacity(samples.len());
    let mut epes = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SkeletonSample> = chunk.iter().collect();
        let images = batch_images(&refs)?;
        let cams: Vec<Intrinsics> = chunk.iter().map(|s| s.intrinsics).collect();
        let roots: Vec<f64> = chunk.iter().map(|s| s.joints.joints[crate::pose::ROOT][2]).collect();
        let preds: Vec<JointSet> = model.predict(store, &images, &cams, &roots)?;
        for (p, s) in preds.iter().zip(chunk) {
            errs.push(mpjpe(p, &s.joints)?);
            epes.push(epe_root_aligned(p, &s.joints)?);
        }
    }
    let n = errs.len() as f64;
    Ok(EvalReport {
        samples: errs.len(),
        mpjpe: errs.iter().sum::<f64>() / n,
        epe: epes.iter().sum::<f64>() / n,
        auc: auc_pck(&errs, &default_thresholds())?,
        per_sample_mpjpe: errs,
    })
}

/// Parameters, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub adam: Option<Adam>,
    pub best_mpjpe: Option<f64>,
}

pub const CKPT_MAGIC: &[u8; 8] = b"DFMCKPT\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    best_mpjpe: Option<f64>,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(b: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(b, name.len() as u32);
    b.extend_from_slice(name.as_bytes());
    put_u32(b, shape.len() as u32);
    for &d in shape {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CkptMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_mpjpe: self.best_mpjpe,
            adam: self.adam.as_ref().map(|a| AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                weight_decay: a.weight_decay,
                step: a.step,
            }),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut b, CKPT_VERSION);
        b.extend_from_slice(&self.model.hash());
        put_u32(&mut b, meta.len() as u32);
        b.extend_from_slice(&meta);
        let mut blobs = 0u32;
        let count_at = b.len();
        put_u32(&mut b, 0);
        for (id, p) in self.store.iter() {
            put_blob(&mut b, &p.name, p.value.shape(), p.value.data());
            blobs += 1;
            if let Some(a) = &self.adam {
                put_blob(&mut b, &format!("{}#adam_m", p.name), &[p.value.len()], &a.m[id.index()]);
                put_blob(&mut b, &format!("{}#adam_v", p.name), &[p.value.len()], &a.v[id.index()]);
                blobs += 2;
            }
        }
        b[count_at..count_at + 4].copy_from_slice(&blobs.to_le_bytes());
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses a checkpoint; when `expect` is given its hash must match.
    pub fn from_bytes(bytes: &[u8], path: &Path, expect: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.err(8, format!("unsupported version {version}")));
        }
        let hash_at = r.pos;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let parsed = serde_json::from_slice::<CkptMeta>(r.take(meta_len)?);
        let meta = parsed.map_err(|e| r.err(meta_at, format!("metadata: {e}")))?;
        if meta.model.hash() != hash {
            return Err(r.err(hash_at, "config hash does not match the stored configuration"));
        }
        if let Some(cfg) = expect {
            if cfg.hash() != hash {
                return Err(r.err(hash_at, "checkpoint was written for a different model configuration"));
            }
        }
        let (_, mut store) = meta.model.build(0)?;
        let mut adam = meta.adam.as_ref().map(|a| Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            step: a.step,
            m: Vec::new(),
            v: Vec::new(),
        });
        let blobs = r.u32()? as usize;
        let per = if adam.is_some() { 3 } else { 1 };
        if blobs != store.len() * per {
            return Err(r.err(r.pos - 4, format!("{blobs} blobs, expected {}", store.len() * per)));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let want = store.param(id).name.clone();
            let shape = store.get(id).shape().to_vec();
            let data = r.blob(&want, &shape)?;
            store.get_mut(id).data_mut().copy_from_slice(&data);
            if let Some(a) = adam.as_mut() {
                let n = shape.iter().product();
                a.m.push(r.blob(&format!("{want}#adam_m"), &[n])?);
                a.v.push(r.blob(&format!("{want}#adam_v"), &[n])?);
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            epoch: meta.epoch,
            store,
            adam,
            best_mpjpe: meta.best_mpjpe,
        })
    }

    pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path, expect)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.b.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let got = String::from_utf8_lossy(self.take(len)?).into_owned();
        if got != name {
            return Err(self.err(at, format!("expected blob {name:?}, found {got:?}")));
        }
        let ndim = self.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        if dims != shape {
            return Err(self.err(at, format!("blob {name:?} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = shape.iter().product();
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_mpjpe: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.17e} heldout_mpjpe={:.17e} seconds={:.3}",
            self.epoch, self.train_loss, self.heldout_mpjpe, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Held-out MPJPE before the first update.
    pub initial_mpjpe: f64,
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainResult {
    pub fn final_mpjpe(&self) -> f64 {
        self.history.last().map_or(self.initial_mpjpe, |r| r.heldout_mpjpe)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Append-only `key=value` log.
    pub log: Option<PathBuf>,
    /// Checkpoint directory: `best.ckpt` and `last.ckpt`.
    pub ckpt_dir: Option<PathBuf>,
}

fn append_log(path: &Option<PathBuf>, line: &str) -> Result<()> {
    if let Some(p) = path {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Splits off the last `holdout` samples.
pub fn split(samples: &[SkeletonSample], holdout: usize) -> Result<(&[SkeletonSample], &[SkeletonSample])> {
    ensure!(
        holdout >= 1 && holdout < samples.len(),
        "train",
        "need at least one training and one held-out sample (have {}, holdout {holdout})",
        samples.len()
    );
    Ok(samples.split_at(samples.len() - holdout))
}

/// Trains from scratch (or from `resume`) on `samples`.
pub fn train(
    cfg: &TrainConfig,
    samples: &[SkeletonSample],
    resume: Option<Checkpoint>,
    out: &TrainOutputs,
) -> Result<TrainResult> {
    cfg.validate()?;
    let (train_set, held) = split(samples, cfg.holdout)?;
    let mcfg = cfg.model_config()?;
    let (model, fresh) = mcfg.build(cfg.seed)?;
    let (mut store, mut adam, start) = match resume {
        Some(c) => {
            ensure!(c.model == mcfg, "train", "checkpoint model configuration differs from the run configuration");
            let adam = c.adam.unwrap_or_else(|| Adam::new(&c.store, cfg.lr, cfg.weight_decay));
            (c.store, adam, c.epoch)
        }
        None => {
            let adam = Adam::new(&fresh, cfg.lr, cfg.weight_decay);
            (fresh, adam, 0)
        }
    };
    if cfg.freeze_offsets {
        for id in offset_param_ids(&model) {
            store.set_frozen(id, true);
        }
    }
    if let Some(d) = &out.ckpt_dir {
        fs::create_dir_all(d)?;
    }
    let ckpt = |store: &ParamStore, adam: &Adam, epoch: usize, best: Option<f64>| Checkpoint {
        model: mcfg.clone(),
        train: Some(cfg.clone()),
        epoch,
        store: store.clone(),
        adam: Some(adam.clone()),
        best_mpjpe: best,
    };

    let initial_mpjpe = evaluate(&model, &store, held, cfg.batch_size)?.mpjpe;
    if start == 0 {
        append_log(&out.log, &format!("epoch=0 heldout_mpjpe={initial_mpjpe:.17e} arch={} seed={}", cfg.arch, cfg.seed))?;
    }
    let mut history = Vec::new();
    let mut best = ckpt(&store, &adam, start, Some(initial_mpjpe));
    let mut last_good = best.clone();
    let (h, w) = {
        let s = train_set[0].image.dim(1);
        (s / HEATMAP_STRIDE, s / HEATMAP_STRIDE)
    };
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SkeletonSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let images = batch_images(&batch)?;
            let (hm_t, d_t) = targets(&batch, h, w)?;
            let mut ctx = Ctx::new(&store, true, true);
            let x = ctx.input(images);
            let outp = model.forward(&mut ctx, x)?;
            let loss = compute_loss(&mut ctx, &outp, &hm_t, &d_t, cfg.heatmap_weight, cfg.depth_weight)?;
            let lv = ctx.value(loss).item();
            let step = ctx.tape.backward(loss).and_then(|_| {
                if lv.is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite { what: format!("training loss at epoch {}", epoch + 1) })
                }
            });
            if let Err(e) = step {
                if let Some(d) = &out.ckpt_dir {
                    last_good.save(&d.join("last.ckpt"))?;
                }
                append_log(&out.log, &format!("abort epoch={} reason={e:?}", epoch + 1))?;
                return Err(e);
            }
            let grads = ctx.param_grads();
            let bn = ctx.take_bn_updates();
            drop(ctx);
            if let Err(e) = adam.step(&mut store, &grads) {
                if let Some(d) = &out.ckpt_dir {
                    last_good.save(&d.join("last.ckpt"))?;
                }
                append_log(&out.log, &format!("abort epoch={} reason={e:?}", epoch + 1))?;
                return Err(e);
            }
            apply_bn_updates(&mut store, &bn);
            total += lv;
            batches += 1;
        }
        let heldout = evaluate(&model, &store, held, cfg.batch_size)?.mpjpe;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            heldout_mpjpe: heldout,
            seconds: t0.elapsed().as_secs_f64(),
        };
        append_log(&out.log, &rec.log_line())?;
        history.push(rec);
        let best_so_far = best.best_mpjpe.unwrap_or(f64::INFINITY);
        last_good = ckpt(&store, &adam, epoch + 1, Some(best_so_far.min(heldout)));
        if heldout < best_so_far {
            best = last_good.clone();
        } else {
            best.best_mpjpe = Some(best_so_far);
        }
        if let Some(d) = &out.ckpt_dir {
            last_good.save(&d.join("last.ckpt"))?;
            best.save(&d.join("best.ckpt"))?;
        }
    }
    Ok(TrainResult {
        initial_mpjpe,
        history,
        best,
        last: last_good,
    })
}

/// Every offset-predictor parameter of the model's DSSM layers.
pub fn offset_param_ids(model: &PoseModel) -> Vec<crate::nn::ParamId> {
    use crate::blocks::{Block, Mixer};
    let mut ids = Vec::new();
    for stage in &model.backbone.stages {
        for b in stage {
            if let Block::Dssm { mixer, .. } = b {
                if let Mixer::Dssm(d) = &mixer.mixer {
                    ids.extend(d.offset_params());
                }
            }
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    #[test]
    fn decay_only_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![2.0, -4.0]).unwrap(), ParamKind::Learnable);
        let mut adam = Adam::new(&store, 0.1, 0.01);
        adam.step(&mut store, &[None]).unwrap();
        assert_eq!(store.get(id).data(), &[2.0 - 0.1 * 0.01 * 2.0, -4.0 + 0.1 * 0.01 * 4.0]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0), ParamKind::Learnable);
        let mut adam = Adam::new(&store, 0.01, 0.0);
        for _ in 0..2000 {
            let x = store.get(id).item();
            adam.step(&mut store, &[Some(vec![2.0 * x])]).unwrap();
        }
        assert!(store.get(id).item().abs() < 1e-3, "{}", store.get(id).item());
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0), ParamKind::Learnable);
        let before = store.clone();
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let err = adam.step(&mut store, &[Some(vec![f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("x"));
        assert_eq!(store, before);
    }

    #[test]
    fn target_is_normalized_and_off_grid_fails() {
        let t = gaussian_target(10.0, 6.0, 8, 8, 4, 2.0).unwrap();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = (0..64).max_by(|&a, &b| t[a].total_cmp(&t[b])).unwrap();
        assert_eq!((peak % 8, peak / 8), (2, 1));
        assert!(gaussian_target(40.0, 6.0, 8, 8, 4, 2.0).is_err());
    }

    #[test]
    fn loss_at_target_is_target_entropy() {
        let t = gaussian_target(13.0, 9.0, 6, 6, 4, 2.0).unwrap();
        let entropy: f64 = -t.iter().map(|q| q * q.ln()).sum::<f64>();
        let hm = Tensor::new(&[1, 1, 6, 6], t.clone()).unwrap();
        let dz = Tensor::new(&[1, 1, 1, 1], vec![-12.5]).unwrap();
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, false, false);
        let logits = ctx.input(hm.map(f64::ln));
        let depths = ctx.input(dz.clone());
        let loss = compute_loss(&mut ctx, &PoseOutputs { logits, depths }, &hm, &dz, 1.0, 0.02).unwrap();
        assert!((ctx.value(loss).item() - entropy).abs() < 1e-12);
        let off = ctx.input(dz.map(|v| v + 10.0));
        let worse = compute_loss(&mut ctx, &PoseOutputs { logits, depths: off }, &hm, &dz, 1.0, 0.02).unwrap();
        assert!((ctx.value(worse).item() - entropy - 0.2).abs() < 1e-12);
    }

    fn tiny_run() -> (TrainConfig, Vec<SkeletonSample>) {
        let synth = SynthConfig { size: 32, focal: 40.0, ..SynthConfig::default() };
        let data = generate_dataset(0, 6, &synth).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            holdout: 2,
            ..TrainConfig::default()
        };
        (cfg, data)
    }

    #[test]
    fn loss_lower_bound_and_checkpoint_round_trip() {
        let (cfg, data) = tiny_run();
        let res = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        assert!(res.history.iter().all(|r| r.train_loss >= 0.0));
        let bytes = res.last.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem"), Some(&res.last.model)).unwrap();
        assert_eq!(back, res.last);
        assert_eq!(back.to_bytes(), bytes);
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem"), None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (cfg, data) = tiny_run();
        let a = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        let b = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        let key = |r: &TrainResult| r.history.iter().map(|h| (h.train_loss.to_bits(), h.heldout_mpjpe.to_bits())).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        assert_eq!(a.last.store, b.last.store);
        assert!(a.last.store.iter().all(|(_, p)| p.value.is_finite()));
    }

    #[test]
    fn frozen_offsets_stay_zero() {
        let (cfg, data) = tiny_run();
        let cfg = TrainConfig { freeze_offsets: true, ..cfg };
        let res = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        let (model, _) = cfg.model_config().unwrap().build(0).unwrap();
        let ids = offset_param_ids(&model);
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&id| res.last.store.get(id).max_abs() == 0.0));
    }

    #[test]
    fn nan_loss_aborts_with_last_good_checkpoint() {
        let (cfg, mut data) = tiny_run();
        data[0].image.data_mut()[5] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs { log: Some(dir.path().join("log")), ckpt_dir: Some(dir.path().to_path_buf()) };
        let err = train(&cfg, &data, None, &out).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let ck = Checkpoint::load(&dir.path().join("last.ckpt"), None).unwrap();
        assert_eq!(ck.epoch, 0);
        assert!(ck.store.iter().all(|(_, p)| p.value.is_finite()));
        assert!(fs::read_to_string(dir.path().join("log")).unwrap().contains("abort"));
    }

    #[test]
    fn resume_reproduces_losses() {
        let (cfg, data) = tiny_run();
        let full = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        let one = TrainConfig { epochs: 1, ..cfg.clone() };
        let first = train(&one, &data, None, &TrainOutputs::default()).unwrap();
        let ck = Checkpoint::from_bytes(&first.last.to_bytes(), Path::new("mem"), None).unwrap();
        let rest = train(&cfg, &data, Some(ck), &TrainOutputs::default()).unwrap();
        assert_eq!(rest.history[0], EpochRecord { seconds: rest.history[0].seconds, ..full.history[1].clone() });
    }
}
