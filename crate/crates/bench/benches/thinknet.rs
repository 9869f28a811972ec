use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use thinknet_core::{
    apply_mode, delta_loss, forward_batch, Example, LossMode, LossSeries, RunConfig, Tape, Tensor, ThinkNetModel,
};

fn filled(rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_backward");
    for n in [32, 64] {
        let a = filled(n, n, 1.0);
        let b = filled(n, n, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.leaf(a.clone());
                let y = tape.leaf(b.clone());
                let p = tape.matmul(x, y).unwrap();
                let s = tape.sum(p);
                black_box(tape.backward(s).unwrap())
            })
        });
    }
    group.finish();
}

fn unrolled_step(c: &mut Criterion) {
    let run = RunConfig::default();
    let model = ThinkNetModel::init(&run).unwrap();
    let (train, _) = run.datasets().unwrap();
    let batch: Vec<&Example> = train.examples.iter().take(run.train.batch_size).collect();

    let mut group = c.benchmark_group("thinknet");
    group.sample_size(20);
    for t in [3, 12] {
        group.bench_with_input(BenchmarkId::new("forward", t), &t, |bench, &t| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, false);
                black_box(forward_batch(&mut tape, &bound, &batch, t).unwrap().series.len())
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", t), &t, |bench, &t| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let fwd = forward_batch(&mut tape, &bound, &batch, t).unwrap();
                let loss = apply_mode(&mut tape, &fwd.series, LossMode::Delta, false).unwrap();
                black_box(tape.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn loss(c: &mut Criterion) {
    let values: Vec<f64> = (0..48).map(|t| 0.7 + 0.1 * ((t * 13 % 7) as f64 - 3.0) / 3.0).collect();
    c.bench_function("delta_loss_48", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let series = LossSeries::from_values(&mut tape, &values).unwrap();
            let l = delta_loss(&mut tape, &series).unwrap();
            black_box(tape.backward(l).unwrap())
        })
    });
}

criterion_group!(benches, matmul, unrolled_step, loss);
criterion_main!(benches);
