use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfmamba::backbone::{build_backbone, forward_pyramid, ArchSpec, Preset};
use dfmamba::dssm::{anchor_grid, deformable_sample, AnchorVariant};
use dfmamba::par;
use dfmamba::ssm::{selective_scan, ScanMode, ScanVars};
use dfmamba::tensor::{self, conv2d_forward, Tape, Tensor};

/// Runs `f` once on the global pool and once on a single worker.
fn both<F: Fn() + Sync + Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| par::single_threaded(&f)));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[4, 32, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 32, 3, 3], -0.1, 0.1, &mut rng);
    both(c, "conv2d_3x3", || {
        std::hint::black_box(conv2d_forward(&x, &w, None, 1, 1).unwrap());
    });

    let (nb, e, n, h, wd) = (4, 64, 16, 16, 16);
    let l = h * wd;
    let inputs = [
        Tensor::uniform(&[nb, e, h, wd], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[nb, e, h, wd], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[nb, e, l], 0.01, 0.1, &mut rng),
        Tensor::uniform(&[e, n], -2.0, -0.5, &mut rng),
        Tensor::uniform(&[nb, n, l], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[nb, n, l], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[e], -1.0, 1.0, &mut rng),
    ];
    both(c, "selective_scan_fwd_bwd", || {
        let mut t = Tape::new();
        let v: Vec<_> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let vars = ScanVars { x: v[0], u: v[1], delta: v[2], a: v[3], b: v[4], c: v[5], d: v[6] };
        let y = selective_scan(&mut t, vars, ScanMode::Selective).unwrap();
        let s = tensor::sum(&mut t, y);
        t.backward(s).unwrap();
    });

    let grid = anchor_grid(AnchorVariant::K9);
    let u = Tensor::uniform(&[4, 64, 16, 16], -1.0, 1.0, &mut rng);
    let off = Tensor::uniform(&[4, 18, 16, 16], -1.5, 1.5, &mut rng);
    let wt = Tensor::uniform(&[4, 9, 16, 16], 0.0, 0.2, &mut rng);
    both(c, "deformable_sample_fwd_bwd", || {
        let mut t = Tape::new();
        let (a, b, k) = (t.leaf(u.clone(), true), t.leaf(off.clone(), true), t.leaf(wt.clone(), true));
        let y = deformable_sample(&mut t, a, b, k, &grid).unwrap();
        let s = tensor::sum(&mut t, y);
        t.backward(s).unwrap();
    });

    let spec = ArchSpec::preset("CCDGDG", Preset::Tiny).unwrap();
    let (bb, store) = build_backbone(&spec, 3, 0).unwrap();
    let img = Tensor::uniform(&[4, 3, 128, 128], -1.0, 1.0, &mut rng);
    both(c, "tiny_backbone_forward_128", || {
        std::hint::black_box(forward_pyramid(&bb, &store, &img).unwrap());
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
