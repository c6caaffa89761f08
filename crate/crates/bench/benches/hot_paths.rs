use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stitchlab_bench::scene;
use stitchlab_core::config::RunConfig;
use stitchlab_core::features::{self, HfConfig};
use stitchlab_core::model::{Model, TrainItem};
use stitchlab_core::nn::Tensor;
use stitchlab_core::synth::{self, ShapeId};
use stitchlab_core::{ConditionEncoder, EncoderConfig, Image, Seed};

fn operators(c: &mut Criterion) {
    let (img, _, _) = scene(ShapeId::ALL[0], 1);
    let hf = HfConfig::default();
    let mut g = c.benchmark_group("operators_64px");
    g.bench_function("sobel", |b| b.iter(|| features::sobel(black_box(&img))));
    g.bench_function("canny", |b| b.iter(|| features::canny(black_box(&img), &hf)));
    g.bench_function("high_frequency", |b| {
        b.iter(|| features::high_frequency(black_box(&img), &hf).unwrap())
    });
    g.bench_function("hog_texture", |b| {
        b.iter(|| features::hog_texture(black_box(&img)).unwrap())
    });
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let enc = ConditionEncoder::new(&EncoderConfig::default()).unwrap();
    let img = Image::filled(enc.config().image_size, enc.config().image_size, 3, 0.3);
    c.bench_function("encoder_encode", |b| b.iter(|| enc.encode(black_box(&img))));
}

fn model() -> Model {
    let mut m = Model::new(&RunConfig::default()).unwrap();
    let refs: Vec<_> = ShapeId::ALL
        .iter()
        .map(|&s| synth::make_reference_set(s, Seed(2)).unwrap())
        .collect();
    m.fit_condition(&refs.iter().collect::<Vec<_>>()).unwrap();
    m
}

fn networks(c: &mut Criterion) {
    let mut m = model();
    let refs = synth::make_reference_set(ShapeId::ALL[1], Seed(2)).unwrap();
    let bundle = m.bundle(&refs).unwrap();
    let (n, d) = bundle.check().unwrap();
    let scenes: Vec<_> = (0..m.cfg.train.batch_size)
        .map(|k| scene(ShapeId::ALL[1], 10 + k as u64))
        .collect();
    let (h, w) = (scenes[0].0.height(), scenes[0].0.width());
    let inputs = Tensor::zeros(&[1, stitchlab_core::diffusion::INPUT_CHANNELS, h, w]);
    let cond = Tensor::new(&[1, n, d], bundle.mean().data().to_vec()).unwrap();
    c.bench_function("denoiser_forward_b1", |b| {
        b.iter(|| {
            m.denoiser
                .predict(black_box(inputs.clone()), &[500], cond.clone())
                .unwrap()
        })
    });
    let mut trainer = m.trainer();
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("train_step_default_batch", |b| {
        b.iter(|| {
            let items = scenes
                .iter()
                .map(|(img, mask, text)| TrainItem {
                    scene: img,
                    mask,
                    cond: &bundle,
                    has_text: *text,
                })
                .collect();
            m.train_step(items, &mut trainer).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, operators, encoder, networks);
criterion_main!(benches);
