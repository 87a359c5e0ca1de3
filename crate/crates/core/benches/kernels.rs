//! Sequential vs data-parallel kernels. Each benchmark runs with one thread
//! and with `max(2, available cores)` threads; build with
//! `--no-default-features` to measure the rayon-free fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metadr_core::domains::synth_digits;
use metadr_core::gradcore::{grad, Tape, Tensor};
use metadr_core::models::{task_loss, Classifier, ModelConfig};
use metadr_core::par;
use metadr_core::rng::stream;
use metadr_core::xforms::{build_set, randomize_batch};
use std::hint::black_box;

fn thread_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(2);
    vec![1, n]
}

fn label(t: usize) -> &'static str {
    if t == 1 || !par::parallel_enabled() {
        "sequential"
    } else {
        "rayon"
    }
}

fn cnn_step(c: &mut Criterion) {
    let data = synth_digits(1, 64).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let x = data.gather(&idx);
    let y = data.gather_labels(&idx);
    let model = ModelConfig::small_cnn([3, 28, 28], 10, 0);
    let params = model.init_params::<f32>().unwrap();
    let mut g = c.benchmark_group("smallcnn_forward_backward_b64");
    g.sample_size(20);
    for t in thread_counts() {
        par::set_threads(t);
        g.bench_with_input(BenchmarkId::new(label(t), t), &t, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let ps = params.attach(&tape);
                let loss = task_loss(&model.logits(&ps, &Tensor::constant(x.clone())).unwrap(), &y).unwrap();
                black_box(grad(&loss, &ps, false).unwrap())
            })
        });
    }
    g.finish();
    par::set_threads(0);
}

fn randomize(c: &mut Criterion) {
    let data = synth_digits(2, 64).unwrap();
    let images = data.gather_images(&(0..64).collect::<Vec<_>>());
    let set = build_set("psi3").unwrap();
    let mut g = c.benchmark_group("randomize_batch_psi3_b64");
    for t in thread_counts() {
        par::set_threads(t);
        g.bench_with_input(BenchmarkId::new(label(t), t), &t, |b, _| {
            let mut rng = stream(0, "bench");
            b.iter(|| black_box(randomize_batch(&set, &images, &mut rng).unwrap()))
        });
    }
    g.finish();
    par::set_threads(0);
}

fn render(c: &mut Criterion) {
    let mut g = c.benchmark_group("synth_digits_500");
    g.sample_size(20);
    for t in thread_counts() {
        par::set_threads(t);
        g.bench_with_input(BenchmarkId::new(label(t), t), &t, |b, _| b.iter(|| black_box(synth_digits(3, 500).unwrap())));
    }
    g.finish();
    par::set_threads(0);
}

criterion_group!(benches, cnn_step, randomize, render);
criterion_main!(benches);
