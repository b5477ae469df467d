use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pdsplat::autodiff::Graph;
use pdsplat::render::{render_kernels, RasterMode};
use pdsplat::scene::SceneSpec;
use pdsplat::trainer::TrainConfig;
use pdsplat_bench::{decoder_workload, joint_trainer, ode_workload};

fn render(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let kernels = spec.template(0);
    let cam = spec.cameras()[0].clone();
    for mode in [RasterMode::Tiled, RasterMode::Reference] {
        c.bench_function(&format!("render_200_64px_{mode:?}"), |b| {
            b.iter(|| render_kernels(black_box(&kernels), &cam, mode))
        });
    }
}

fn decoder(c: &mut Criterion) {
    let (dec, params, global, local) = decoder_workload(400);
    c.bench_function("decoder_forward_400", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let nb = params.bind(&mut g);
            let gv = g.constant(global.clone());
            let lv = g.constant(local.clone());
            black_box(dec.forward(&mut g, &nb, Some(gv), lv, 0.5).unwrap());
        })
    });
}

fn ode(c: &mut Criterion) {
    let (field, params, g0) = ode_workload();
    c.bench_function("ode_solve_0_to_1", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let nb = params.bind(&mut g);
            let gv = g.constant(g0.clone());
            black_box(field.solve(&mut g, &nb, gv, 0.0, 1.0).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let (ds, mut t, train) = joint_trainer(TrainConfig::default()).unwrap();
    let mut i = 0;
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("joint_step", |b| {
        b.iter(|| {
            i = (i + 1) % train.len();
            t.train_step(&ds, train[i]).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, render, decoder, ode, train_step);
criterion_main!(benches);
