use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mcseg_bench::{batch, conv_graph, scene, trainer};
use mcseg_core::metrics::{boundary_scores, DEFAULT_MATCH_RADIUS};
use mcseg_core::refine::{refine_with_boundaries, DEFAULT_MAX_AREA_FRACTION, DEFAULT_THRESHOLD};
use mcseg_core::{Domain, TaskSet, TrainConfig};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(20);
    group.bench_function("forward_16x16x64x64", |b| {
        b.iter(|| {
            let (mut g, x, w, bias) = conv_graph(16, 16, 64, 64);
            black_box(g.conv2d(x, w, bias, 1, 1).unwrap());
        })
    });
    group.bench_function("forward_backward_16x16x64x64", |b| {
        b.iter(|| {
            let (mut g, x, w, bias) = conv_graph(16, 16, 64, 64);
            let y = g.conv2d(x, w, bias, 1, 1).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(w).is_some());
        })
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let src = batch(&scene(Domain::Source, (64, 64), 1), true);
    let tgt = batch(&scene(Domain::Target, (64, 64), 2), false);
    let mut group = c.benchmark_group("trainer");
    group.sample_size(10);
    for tasks in [TaskSet::SegOnly, TaskSet::Triple] {
        let config = TrainConfig {
            tasks,
            check_partitions: false,
            ..TrainConfig::default()
        };
        let mut t = trainer(&config);
        group.bench_function(format!("iteration_{}", tasks.name()), |b| {
            b.iter(|| black_box(t.iterate(&src, &tgt, config.num_c_steps).unwrap()))
        });
    }
    group.finish();
}

fn data_and_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    group.sample_size(20);
    let mut seed = 0;
    group.bench_function("scene_64x64", |b| {
        b.iter(|| {
            seed += 1;
            black_box(scene(Domain::Target, (64, 64), seed))
        })
    });
    let samples: Vec<_> = (0..8).map(|s| scene(Domain::Source, (64, 64), s)).collect();
    let boundaries: Vec<_> = samples.iter().map(|s| s.boundaries.clone()).collect();
    group.bench_function("boundary_scores_8x64x64", |b| {
        b.iter(|| black_box(boundary_scores(&boundaries, &boundaries, DEFAULT_MATCH_RADIUS).unwrap()))
    });
    let s = &samples[0];
    group.bench_function("refine_64x64", |b| {
        b.iter(|| {
            black_box(
                refine_with_boundaries(
                    &s.labels,
                    &s.boundaries,
                    DEFAULT_THRESHOLD,
                    DEFAULT_MAX_AREA_FRACTION,
                )
                .unwrap(),
            )
        })
    });
    group.finish();
}

criterion_group!(benches, conv, training, data_and_eval);
criterion_main!(benches);
