//! Hot kernels of one training step, forward and backward.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use draftnet::config::ModelConfig;
use draftnet::d2r::Stage;
use draftnet::data::synth_dataset;
use draftnet::losses::contextual::{contextual_loss, ContextualConfig};
use draftnet::losses::extractor::PerceptualExtractor;
use draftnet::sampler::{saliency_to_grid_t, warp_t};
use draftnet::tensor::Tensor;
use draftnet::{D2RModel, D2RVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3_16ch");
    for n in [32, 64] {
        let x = Tensor::param(random(&[16, n, n], 1), &[16, n, n]);
        let w = Tensor::param(random(&[16, 16, 3, 3], 2), &[16, 16, 3, 3]);
        g.bench_with_input(BenchmarkId::new("fwd_bwd", n), &n, |b, _| {
            b.iter(|| black_box(x.conv2d(&w, None, 1, 1).sum().backward()))
        });
    }
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let n = 64;
    let x = Tensor::param(random(&[3, n, n], 3), &[3, n, n]);
    let s = Tensor::param(random(&[1, 8, 8], 4).iter().map(|v| v.exp()).collect(), &[1, 8, 8]);
    c.bench_function("saliency_grid_and_warp_64", |b| {
        b.iter(|| {
            let grid = saliency_to_grid_t(&s, 0.3).unwrap();
            black_box(warp_t(&x, &grid).sum().backward())
        })
    });
}

fn contextual(c: &mut Criterion) {
    let ext = PerceptualExtractor::vgg19_random(8, 19).unwrap();
    let cfg = ContextualConfig::default();
    let n = 64;
    let x = Tensor::param(random(&[3, n, n], 5), &[3, n, n]);
    let y = Tensor::new(random(&[3, n, n], 6), &[3, n, n]);
    for layer in ["conv3_2", "conv4_2"] {
        c.bench_function(&format!("contextual_{layer}_64"), |b| {
            b.iter(|| black_box(contextual_loss(&x, &y, layer, &ext, &cfg).unwrap().backward()))
        });
    }
}

fn train_step(c: &mut Criterion) {
    let mut synth = draftnet::data::SynthConfig::default();
    synth.count = 1;
    let sample = synth_dataset(&synth).unwrap().remove(0).sample;
    let mut model = D2RModel::new(ModelConfig::default(), D2RVariant::NoShape, 0).unwrap();
    let mut g = c.benchmark_group("d2r");
    g.sample_size(10);
    g.bench_function("stream_step_64", |b| b.iter(|| black_box(model.train_step(Stage::Streams, &sample).unwrap())));
    g.finish();
}

criterion_group!(benches, conv, sampler, contextual, train_step);
criterion_main!(benches);
