//! Kernel and whole-network benchmarks at the CIFAR-10 working shapes.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use s2c_core::forward::{backward, forward_eval, forward_train};
use s2c_core::layers::{ConvParams, ConvSpec};
use s2c_core::{
    apply_growth, default_channel_plan, plan_growth, Fill, SeededRng, SeriesNetwork, Tensor,
};

fn conv_forward(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let spec = ConvSpec::new(8, 8, 5, 1);
    let params = ConvParams::<f32>::new_he(spec, &mut rng).unwrap();
    let input = Tensor::<f32>::alloc(
        &[16, 8, 32, 32],
        Fill::Normal {
            mean: 0.0,
            stddev: 1.0,
            rng: &mut rng,
        },
    )
    .unwrap();
    c.bench_function("conv 8->8 5x5 batch16 32x32 forward", |b| {
        b.iter(|| black_box(params.forward(black_box(&input)).unwrap()))
    });
    let upstream = Tensor::<f32>::alloc(
        &[16, 8, 32, 32],
        Fill::Normal {
            mean: 0.0,
            stddev: 1.0,
            rng: &mut rng,
        },
    )
    .unwrap();
    c.bench_function("conv 8->8 5x5 batch16 32x32 backward", |b| {
        b.iter(|| black_box(params.backward(black_box(&input), black_box(&upstream)).unwrap()))
    });
}

fn stage2_network(rng: &mut SeededRng) -> SeriesNetwork<f32> {
    let mut net =
        SeriesNetwork::build_plain(3, &default_channel_plan(), 10, 0.9999, rng).unwrap();
    for _ in 0..2 {
        let plan = plan_growth(&net);
        net = apply_growth(&net, &plan, rng).unwrap();
    }
    net
}

fn network_passes(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let mut net = stage2_network(&mut rng);
    let batch = Tensor::<f32>::alloc(
        &[16, 3, 32, 32],
        Fill::Normal {
            mean: 0.0,
            stddev: 1.0,
            rng: &mut rng,
        },
    )
    .unwrap();
    let labels: Vec<u8> = (0..16).map(|i| (i % 10) as u8).collect();
    c.bench_function("stage-2 net batch16 eval forward", |b| {
        b.iter(|| black_box(forward_eval(&net, black_box(&batch)).unwrap()))
    });
    c.bench_function("stage-2 net batch16 train step (fwd+bwd)", |b| {
        b.iter(|| {
            let cache = forward_train(&mut net, black_box(&batch), &labels).unwrap();
            black_box(backward(&net, &cache).unwrap())
        })
    });
}

fn growth(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let base = SeriesNetwork::<f32>::build_plain(3, &default_channel_plan(), 10, 0.9999, &mut rng)
        .unwrap();
    let plan = plan_growth(&base);
    c.bench_function("apply growth stage 0 -> 1", |b| {
        b.iter_batched(
            || SeededRng::new(7),
            |mut rng| black_box(apply_growth(&base, &plan, &mut rng).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv_forward, network_passes, growth);
criterion_main!(benches);
