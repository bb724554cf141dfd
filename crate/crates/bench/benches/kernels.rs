use augsens_bench::{gradient_image, saltelli_block};
use augsens_core::augment::{AugmentationSet, Transform};
use augsens_core::convnet::tinynet_a;
use augsens_core::estimators::SaltelliAccumulator;
use augsens_core::inputspace::{saltelli_plan, sobol_sequence, InputSpaceModel};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn forward(c: &mut Criterion) {
    let net = tinynet_a(10, 0).unwrap();
    let x = gradient_image(32).into_data();
    c.bench_function("tinynet_forward", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("tinynet_forward_with_checkpoints", |b| {
        b.iter(|| net.forward_with_checkpoints(black_box(&x), 0).unwrap())
    });
}

fn sampling(c: &mut Criterion) {
    c.bench_function("sobol_sequence_16x4096", |b| b.iter(|| sobol_sequence(black_box(16), 4096, 0).unwrap()));
    let space = InputSpaceModel::for_set(AugmentationSet::A1, 10, 32, 32).unwrap();
    c.bench_function("saltelli_plan_a1_1024", |b| b.iter(|| saltelli_plan(black_box(&space), 1024, 0).unwrap()));
}

fn accumulate(c: &mut Criterion) {
    let groups = 8;
    let units = 8192;
    let blocks: Vec<_> = (0..16).map(|o| saltelli_block(groups, units, o)).collect();
    c.bench_function("saltelli_accumulate_16_blocks_8192_units", |b| {
        b.iter_batched(
            || SaltelliAccumulator::new(groups, units),
            |mut acc| {
                for blk in &blocks {
                    acc.push_block(blk.view()).unwrap();
                }
                acc.finish().unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

fn transforms(c: &mut Criterion) {
    let img = gradient_image(32);
    let ops = [
        ("erase", Transform::Erase { cx: 0.4, cy: 0.6, w: 0.3, h: 0.2 }),
        ("gaussian_blur", Transform::GaussianBlur { sigma: 2.0 }),
        ("rotate_crop", Transform::RotateCrop { degrees: 20.0 }),
        ("hue", Transform::Hue { shift: 0.05 }),
    ];
    for (name, t) in ops {
        c.bench_function(&format!("transform_{name}"), |b| b.iter(|| t.apply(black_box(&img)).unwrap()));
    }
}

criterion_group!(benches, forward, sampling, accumulate, transforms);
criterion_main!(benches);
