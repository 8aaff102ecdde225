use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semloc_core::detect::Keypoint;
use semloc_core::geometry::{ransac_homography, Homography};
use semloc_core::losses::quantized_ap_with_grad;
use semloc_core::matching::{mnn_match, DescriptorSet};
use semloc_core::net::{infer, init_weights, NetworkConfig};
use semloc_core::synth::generate_scene;
use semloc_core::tensor::{Graph, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for &(ch, size) in &[(8usize, 64usize), (16, 32)] {
        let x = random_tensor(&mut rng, &[ch, size, size]);
        let k = random_tensor(&mut rng, &[ch, ch, 3, 3]);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let kv = g.param(k.clone());
                let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let cfg = NetworkConfig::default();
    let w = init_weights(&cfg, 1).unwrap();
    let scene = generate_scene(3, 64).unwrap();
    c.bench_function("forward_64", |b| b.iter(|| infer(&w, &scene.image).unwrap()));
}

fn descriptor_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DescriptorSet {
    let kps = (0..n)
        .map(|i| Keypoint { x: (i % 64) as f64, y: (i / 64) as f64, score: 1.0 })
        .collect();
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    DescriptorSet::new(kps, data, d, 64, 64).unwrap()
}

fn mnn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = descriptor_set(&mut rng, 1000, 32);
    let b = descriptor_set(&mut rng, 1000, 32);
    c.bench_function("mnn_1000x1000", |bch| bch.iter(|| mnn_match(&a, &b, None).unwrap()));
}

fn ransac(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = Homography::new([[1.05, 0.04, 2.0], [-0.03, 0.97, -1.5], [1e-4, 2e-4, 1.0]]).unwrap();
    let src: Vec<(f64, f64)> = (0..200).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
    let dst: Vec<(f64, f64)> = src
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i % 2 == 0 {
                h.apply(p).unwrap()
            } else {
                (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))
            }
        })
        .collect();
    c.bench_function("ransac_200pts_1000it", |b| {
        b.iter(|| ransac_homography(&src, &dst, 1000, 3.0, 7).unwrap())
    });
}

fn ap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pos: Vec<bool> = (0..64).map(|i| i % 9 == 0).collect();
    c.bench_function("quantized_ap_64", |b| b.iter(|| quantized_ap_with_grad(&scores, &pos, 25).unwrap()));
}

criterion_group!(benches, conv2d, forward, mnn, ransac, ap);
criterion_main!(benches);
