//! Kernel timings. Run once with default features and once with
//! `--no-default-features`; the group name records which build ran.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use liverseg_tensor::{batch_norm, bilinear_resize, conv2d, parallel, ConvParams, Graph, Mode, RunningStats, Tensor};

fn build() -> &'static str {
    if parallel::ENABLED {
        "parallel"
    } else {
        "sequential"
    }
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group(format!("kernels/{}", build()));
    group.sample_size(20);

    let x = Tensor::randn(&[10, 16, 32, 32], 1.0, &mut rng);
    for dilation in [1, 4] {
        let p = ConvParams::new(16, 16, 3).with_dilation(dilation);
        let w = Tensor::randn(&p.weight_shape(), 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("conv3x3", format!("d{dilation}")), &p, |b, p| {
            b.iter(|| conv2d(&x, &w, None, p).unwrap())
        });
    }

    let p = ConvParams::new(16, 16, 3).with_dilation(2);
    let w = Tensor::randn(&p.weight_shape(), 0.1, &mut rng);
    group.bench_function("conv3x3_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let wi = g.variable(w.clone());
            let y = g.conv2d(xi, wi, None, &p).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });

    let gamma = Tensor::full(&[16], 1.0);
    let beta = Tensor::zeros(&[16]);
    group.bench_function("batch_norm_train", |b| {
        let mut stats = RunningStats::new(16);
        b.iter(|| batch_norm(&x, &gamma, &beta, &mut stats, Mode::Train).unwrap())
    });

    let logits = Tensor::randn(&[10, 2, 8, 8], 1.0, &mut rng);
    group.bench_function("bilinear_8_to_64", |b| b.iter(|| bilinear_resize(&logits, 64, 64).unwrap()));
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
