mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use dfmamba::backbone::{bench_forward, stage_shapes, ArchSpec, Preset, DEFAULT_ARCH, PYRAMID_STAGES, PYRAMID_STRIDES};
use dfmamba::dssm::AnchorVariant;
use dfmamba::synth::{self, SynthConfig};
use dfmamba::train::{self, Checkpoint, TrainConfig, TrainOutputs};
use dfmamba::{gradsuite, par};

use report::RunReport;

/// Thread count for the data-parallel kernels.
pub const THREADS_ENV: &str = "DFMAMBA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dfmamba", version, about = "DF-Mamba hand-pose backbone: data, training, checks and benchmarks")]
struct Cli {
    /// TOML file supplying defaults for arch, anchors, preset, seed, lr and epochs.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Also write the JSON report to FILE.
    #[arg(long, global = true, value_name = "FILE")]
    report: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Six stage symbols over {C,D,G}, e.g. CCDGDG.
    #[arg(long, value_parser = parse_arch_flag)]
    arch: Option<String>,
    /// Deformable anchors per step: 1, 9 or 25.
    #[arg(long, value_parser = parse_anchors)]
    anchors: Option<AnchorVariant>,
    /// Width and depth preset: tiny or default.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic hand dataset.
    Gen {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        input: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pose model on a dataset directory.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, train.log and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Samples at the end of the dataset held out for evaluation.
        #[arg(long)]
        holdout: Option<usize>,
        /// Keep the deformable offset predictors at zero.
        #[arg(long)]
        freeze_offsets: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluate on every sample instead of the training run's held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Finite-difference check of every operation and block.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Inference throughput of the backbone.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        input: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Run on a single worker thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Print the architecture, per-stage shapes and parameter counts.
    Inspect {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        input: usize,
    },
}

fn parse_arch_flag(s: &str) -> Result<String, String> {
    dfmamba::backbone::parse_arch(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parse_anchors(s: &str) -> Result<AnchorVariant, String> {
    match s {
        "1" | "9" | "25" => s.parse().map_err(|e: dfmamba::Error| e.to_string()),
        _ => Err(format!("expected 1, 9 or 25, got {s:?}")),
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: dfmamba::Error| e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    arch: Option<String>,
    anchors: Option<usize>,
    preset: Option<String>,
    seed: Option<u64>,
    lr: Option<f64>,
    epochs: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Criteria(String),
    Runtime(String),
}

impl From<dfmamba::Error> for Failure {
    fn from(e: dfmamba::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(p) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
    let cfg: FileConfig = toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
    if let Some(a) = &cfg.arch {
        parse_arch_flag(a).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
    }
    Ok(cfg)
}

struct Resolved {
    arch: String,
    anchors: AnchorVariant,
    preset: Preset,
    seed: u64,
}

impl Resolved {
    fn spec(&self) -> Result<ArchSpec, Failure> {
        Ok(ArchSpec::preset(&self.arch, self.preset)?.with_anchors(self.anchors))
    }

    fn json(&self) -> serde_json::Value {
        json!({
            "arch": self.arch,
            "anchors": self.anchors.count(),
            "preset": self.preset.to_string(),
            "seed": self.seed,
        })
    }
}

/// Flags win over the config file, which wins over built-in defaults.
fn resolve(m: &ModelArgs, file: &FileConfig) -> Result<Resolved, Failure> {
    let anchors = match (m.anchors, file.anchors) {
        (Some(a), _) => a,
        (None, Some(n)) => parse_anchors(&n.to_string()).map_err(|e| Failure::Usage(format!("config anchors: {e}")))?,
        (None, None) => AnchorVariant::K9,
    };
    let preset = match (m.preset, &file.preset) {
        (Some(p), _) => p,
        (None, Some(s)) => parse_preset(s).map_err(|e| Failure::Usage(format!("config preset: {e}")))?,
        (None, None) => Preset::Default,
    };
    Ok(Resolved {
        arch: m.arch.clone().or_else(|| file.arch.clone()).unwrap_or_else(|| DEFAULT_ARCH.into()),
        anchors,
        preset,
        seed: m.seed.or(file.seed).unwrap_or(0),
    })
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    par::configure_threads(n).map_err(Failure::Runtime)
}

fn run(cli: Cli) -> Result<RunReport, Failure> {
    configure_threads()?;
    let file = load_config(cli.config.as_deref())?;
    let t0 = Instant::now();
    let mut report = match cli.cmd {
        Cmd::Gen { count, seed, input, out } => {
            if input == 0 || input % 32 != 0 {
                return Err(Failure::Usage(format!("--input must be a positive multiple of 32, got {input}")));
            }
            let seed = seed.or(file.seed).unwrap_or(0);
            let cfg = SynthConfig::for_size(input);
            let samples = synth::generate_dataset(seed, count, &cfg)?;
            synth::write_dataset(&samples, &out, Some(&cfg))?;
            let mut r = RunReport::new("gen", Some(seed), json!({ "count": count, "input": input, "out": out, "synth": cfg }));
            r.metric("samples", samples.len());
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
            r
        }
        Cmd::Train { model, data, out, ckpt, epochs, lr, batch_size, holdout, freeze_offsets } => {
            let res = resolve(&model, &file)?;
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                arch: res.arch.clone(),
                preset: res.preset,
                anchors: res.anchors,
                lr: lr.or(file.lr).unwrap_or(d.lr),
                epochs: epochs.or(file.epochs).unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                seed: res.seed,
                holdout: holdout.unwrap_or(d.holdout),
                freeze_offsets,
                ..d
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let samples = synth::read_dataset(&data)?;
            let resume = ckpt.map(|p| Checkpoint::load(&p, Some(&cfg.model_config()?))).transpose()?;
            fs::create_dir_all(&out)?;
            let outputs = TrainOutputs { log: Some(out.join("train.log")), ckpt_dir: Some(out.clone()) };
            let result = train::train(&cfg, &samples, resume, &outputs)?;
            let mut r = RunReport::new("train", Some(cfg.seed), serde_json::to_value(&cfg).expect("config serializes"));
            r.metric("initial_mpjpe", result.initial_mpjpe);
            r.metric("final_mpjpe", result.final_mpjpe());
            r.metric("best_mpjpe", result.best.best_mpjpe);
            r.metric("train_loss", result.history.iter().map(|h| h.train_loss).collect::<Vec<_>>());
            r.metric("heldout_mpjpe", result.history.iter().map(|h| h.heldout_mpjpe).collect::<Vec<_>>());
            for h in &result.history {
                r.timing(&format!("epoch_{}_s", h.epoch), h.seconds);
            }
            eprintln!(
                "held-out MPJPE {:.2} mm -> {:.2} mm; checkpoints in {}",
                result.initial_mpjpe,
                result.final_mpjpe(),
                out.display()
            );
            r.timing("total_s", t0.elapsed().as_secs_f64());
            r.write(&out.join("report.json"))?;
            r
        }
        Cmd::Eval { data, ckpt, all } => {
            let c = Checkpoint::load(&ckpt, None)?;
            let samples = synth::read_dataset(&data)?;
            let (model, _) = c.model.build(0)?;
            let batch = c.train.as_ref().map_or(8, |t| t.batch_size);
            let set = match (&c.train, all) {
                (Some(t), false) => train::split(&samples, t.holdout)?.1,
                _ => &samples[..],
            };
            let e = train::evaluate(&model, &c.store, set, batch)?;
            let mut r = RunReport::new(
                "eval",
                c.train.as_ref().map(|t| t.seed),
                json!({ "data": data, "ckpt": ckpt, "all": all, "model": c.model }),
            );
            r.metric("samples", e.samples);
            r.metric("mpjpe", e.mpjpe);
            r.metric("epe", e.epe);
            r.metric("auc", e.auc);
            r.metric("checkpoint_epoch", c.epoch);
            r.metric("checkpoint_best_mpjpe", c.best_mpjpe);
            eprintln!("MPJPE {:.3} mm, EPE {:.3} mm, AUC {:.4} over {} samples", e.mpjpe, e.epe, e.auc, e.samples);
            r
        }
        Cmd::Gradcheck { model } => {
            let res = resolve(&model, &file)?;
            let reports = gradsuite::run(&res.spec()?, res.seed)?;
            let mut r = RunReport::new("gradcheck", Some(res.seed), res.json());
            for g in &reports {
                r.metric(&g.name, json!({ "max_rel_error": g.max_rel_error, "coords": g.coords_checked }));
                r.check(&g.name, g.max_rel_error < gradsuite::TOLERANCE);
                eprintln!("{:<24} {:.3e}", g.name, g.max_rel_error);
            }
            r
        }
        Cmd::Bench { model, input, iters, batch, sequential } => {
            let res = resolve(&model, &file)?;
            if input == 0 || input % 32 != 0 || iters == 0 || batch == 0 {
                return Err(Failure::Usage("--input must be a positive multiple of 32; --iters and --batch positive".into()));
            }
            let spec = res.spec()?;
            let b = if sequential {
                par::single_threaded(|| bench_forward(&spec, input, batch, iters, res.seed))?
            } else {
                bench_forward(&spec, input, batch, iters, res.seed)?
            };
            let mut cfg = res.json();
            cfg["input"] = json!(input);
            cfg["iters"] = json!(iters);
            cfg["batch"] = json!(batch);
            cfg["sequential"] = json!(sequential);
            let mut r = RunReport::new("bench", Some(res.seed), cfg);
            r.metric("params", b.params);
            r.timing("mean_ms", b.mean_ms);
            r.timing("min_ms", b.min_ms);
            r.timing("images_per_sec", b.images_per_sec);
            r.timing("threads", if sequential { 1.0 } else { b.threads as f64 });
            eprintln!("{} @ {input}: {:.2} images/s ({:.1} ms mean)", b.arch, b.images_per_sec, b.mean_ms);
            r
        }
        Cmd::Inspect { model, input } => {
            let res = resolve(&model, &file)?;
            let spec = res.spec()?;
            let stages = stage_shapes(&spec, input).map_err(|e| Failure::Usage(e.to_string()))?;
            let mcfg = train::ModelConfig {
                head: dfmamba::pose::HeadConfig::for_widths(&spec.widths),
                spec: spec.clone(),
                in_channels: synth::CHANNELS,
            };
            let (_, store) = mcfg.build(res.seed)?;
            let backbone: usize = store
                .iter()
                .filter(|(_, p)| p.name.starts_with("backbone") && p.kind == dfmamba::nn::ParamKind::Learnable)
                .map(|(_, p)| p.value.len())
                .sum();
            let total = dfmamba::backbone::count_params(&store);
            let pyramid: Vec<_> = PYRAMID_STAGES
                .iter()
                .zip(PYRAMID_STRIDES)
                .map(|(&s, stride)| json!({ "stage": s + 1, "stride": stride, "shape": stages[s] }))
                .collect();
            println!("{spec}");
            for (s, sh) in stages.iter().enumerate() {
                println!("stage {} {:?} depth {} -> {:?}", s + 1, spec.kinds[s], spec.depths[s], sh);
            }
            println!("params: backbone {backbone}, head {}, total {total}", total - backbone);
            let mut cfg = res.json();
            cfg["input"] = json!(input);
            let mut r = RunReport::new("inspect", Some(res.seed), cfg);
            r.metric("spec", &spec);
            r.metric("stage_shapes", &stages);
            r.metric("pyramid", pyramid);
            r.metric("backbone_params", backbone);
            r.metric("head_params", total - backbone);
            r.metric("total_params", total);
            r
        }
    };
    report.timings.entry("total_s".into()).or_insert(t0.elapsed().as_secs_f64());
    if let Some(p) = &cli.report {
        report.write(p)?;
    }
    if !report.passed {
        let failed: Vec<_> = report.checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k.as_str()).collect();
        println!("{}", report.to_json());
        return Err(Failure::Criteria(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(r) => {
            println!("{}", r.to_json());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Criteria(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
