use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pixmatch::kernels::{conv2d_forward, ConvGeometry};
use pixmatch::par::set_parallel;
use pixmatch::{deform_conv2d, gaussian_init, warp, Graph, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bench_deform(c: &mut Criterion) {
    let x: Tensor<f32> = gaussian_init([4, 64, 16, 16], 1.0, 1).unwrap();
    let w: Tensor<f32> = gaussian_init([32, 64, 3, 3], 0.1, 2).unwrap();
    let off: Tensor<f32> = gaussian_init([4, 18, 16, 16], 1.5, 3).unwrap();
    let mut group = c.benchmark_group("deform_conv2d");
    for (name, on) in modes() {
        set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| deform_conv2d(black_box(&x), &w, &off, None, 1, 1).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, ov) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(off.clone(), true));
                let y = g.deform_conv2d(xv, wv, ov, None, 1, 1).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x: Tensor<f32> = gaussian_init([4, 16, 64, 64], 1.0, 4).unwrap();
    let w: Tensor<f32> = gaussian_init([32, 16, 3, 3], 0.1, 5).unwrap();
    let mut group = c.benchmark_group("conv2d");
    for (name, on) in modes() {
        set_parallel(on);
        group.bench_function(name, |b| b.iter(|| conv2d_forward(black_box(&x), &w, None, ConvGeometry::same(3)).unwrap()));
    }
    group.finish();
}

fn bench_warp(c: &mut Criterion) {
    let x: Tensor<f32> = gaussian_init([4, 3, 64, 64], 1.0, 6).unwrap();
    let off: Tensor<f32> = gaussian_init([4, 2, 64, 64], 2.0, 7).unwrap();
    let mut group = c.benchmark_group("warp");
    for (name, on) in modes() {
        set_parallel(on);
        group.bench_function(name, |b| b.iter(|| warp(black_box(&x), &off).unwrap()));
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, bench_deform, bench_conv, bench_warp);
criterion_main!(benches);
