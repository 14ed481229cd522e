use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddacdn_core::data::Domain;
use ddacdn_core::datasynth::{synth_sample, SynthSpec};
use ddacdn_core::detector::{DetectorGeometry, ModelParams};
use ddacdn_core::imgproc::{apage, clahe, ApageConfig};
use ddacdn_core::mkmmd::{mmd2, Estimator, KernelBank};
use ddacdn_core::ndgrad::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, [8, 16, 16, 16]);
    let w = random(&mut rng, [32, 16, 3, 3]);
    c.bench_function("conv2d 8x16x16x16 -> 32, 3x3", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bias = g.constant(Tensor::zeros([32]));
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), bias, 1).unwrap();
            black_box(y.value());
        })
    });
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let g = Graph::new();
            let wv = g.param(w.clone());
            let bias = g.constant(Tensor::zeros([32]));
            let y = g.constant(x.clone()).conv2d(wv, bias, 1).unwrap().sum();
            black_box(g.backward(y).unwrap().wrt(wv));
        })
    });
}

fn mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = Tensor::new([64, 64], (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let xt = Tensor::new([64, 64], (0..64 * 64).map(|_| rng.gen_range(-0.5..1.5)).collect()).unwrap();
    let bank = KernelBank::from_median(&xs, &xt).unwrap();
    c.bench_function("mmd2 biased 64x64 vs 64x64", |b| {
        b.iter(|| black_box(mmd2(&bank, &xs, &xt, Estimator::Biased).unwrap()))
    });
}

fn enhancement(c: &mut Criterion) {
    let spec = SynthSpec { size: 256, ..SynthSpec::default() };
    let img = synth_sample(&spec, Domain::Target, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().image;
    let cfg = ApageConfig::default();
    c.bench_function("clahe 256x256", |b| b.iter(|| black_box(clahe(&img, &cfg).unwrap())));
    c.bench_function("apage 256x256", |b| b.iter(|| black_box(apage(&img, &cfg).unwrap())));
}

fn detector(c: &mut Criterion) {
    let params = ModelParams::init(DetectorGeometry::default(), 4).unwrap();
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<_> = (0..8).map(|k| synth_sample(&spec, Domain::Source, k % 4, &mut rng).unwrap().image).collect();
    let refs: Vec<_> = imgs.iter().collect();
    c.bench_function("detector predict batch 8", |b| b.iter(|| black_box(params.predict(&refs).unwrap())));
}

criterion_group!(benches, conv, mmd, enhancement, detector);
criterion_main!(benches);
