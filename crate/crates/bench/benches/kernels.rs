use arcnet_core::degradation::{sample_params, simulate_cataract};
use arcnet_core::evaluation::ssim;
use arcnet_core::frequency::decompose;
use arcnet_core::network::ops::{conv2d, conv_transpose2d};
use arcnet_core::phantom;
use candle_core::{Device, Tensor, Var};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn image_kernels(c: &mut Criterion) {
    let (clear, degraded) = phantom::simulated_pair(256, 256, 1);
    c.bench_function("decompose 256 r26", |b| b.iter(|| decompose(black_box(&degraded), 26, 9.0).unwrap()));
    let params = sample_params(256, 256, 3);
    c.bench_function("simulate_cataract 256", |b| {
        b.iter(|| simulate_cataract(black_box(&clear), &params).unwrap())
    });
    c.bench_function("ssim 256", |b| b.iter(|| ssim(black_box(&clear), &degraded, None).unwrap()));
}

fn conv_kernels(c: &mut Criterion) {
    let dev = Device::Cpu;
    let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, (4, 32, 64, 64), &dev).unwrap()).unwrap();
    let w = Var::from_tensor(&Tensor::randn(0f32, 0.02, (64, 32, 4, 4), &dev).unwrap()).unwrap();
    c.bench_function("conv2d 32->64 64x64 fwd", |b| b.iter(|| conv2d(&x, &w, None, 2, 1).unwrap()));
    c.bench_function("conv2d 32->64 64x64 fwd+bwd", |b| {
        b.iter(|| conv2d(&x, &w, None, 2, 1).unwrap().sum_all().unwrap().backward().unwrap())
    });
    let y = Var::from_tensor(&Tensor::randn(0f32, 1.0, (4, 64, 32, 32), &dev).unwrap()).unwrap();
    let wt = Var::from_tensor(&Tensor::randn(0f32, 0.02, (64, 32, 4, 4), &dev).unwrap()).unwrap();
    c.bench_function("conv_transpose2d 64->32 32x32 fwd+bwd", |b| {
        b.iter(|| {
            conv_transpose2d(&y, &wt, None, 2, 1)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap()
        })
    });
}

criterion_group!(benches, image_kernels, conv_kernels);
criterion_main!(benches);
