use criterion::{black_box, criterion_group, criterion_main, Criterion};

use lsa_bench::{clip, context};
use lsa_core::attack::Objective;
use lsa_core::distances::{Metric, MetricConfig, MetricKind};
use lsa_core::ledger::ComputeLedger;
use lsa_core::rng::GaussianStream;
use lsa_core::stats::{auc, delong_ci};

fn metrics(c: &mut Criterion) {
    let mut rng = GaussianStream::new(1);
    let a = rng.normal_vec(1024);
    let b = rng.normal_vec(1024);
    for kind in MetricKind::ALL {
        let m = Metric::new(kind, &MetricConfig::default()).unwrap();
        c.bench_function(&format!("metric/{kind}/1024"), |bench| bench.iter(|| m.eval(black_box(&a), black_box(&b)).unwrap()));
    }
}

fn reverse_and_gradient(c: &mut Criterion) {
    let ctx = context(256, 25);
    let x = clip(256);
    let metric = Metric::new(MetricKind::MrStft, &MetricConfig::default()).unwrap();
    let t = 60;
    let (_, x_t) = ctx.noised_state(&x, t, 0).unwrap();
    c.bench_function("reverse/n256/25calls", |b| {
        b.iter(|| ctx.reconstruct_value(black_box(&x_t), t, &mut ComputeLedger::default()).unwrap())
    });
    let mut obj = ctx.objective(&metric, &x, t, 0).unwrap();
    obj.begin_level(&mut ComputeLedger::default()).unwrap();
    let delta = GaussianStream::new(2).normal_vec(256);
    c.bench_function("probe-gradient/n256/25calls", |b| {
        b.iter(|| obj.value_and_grad(black_box(&delta), &mut ComputeLedger::default()).unwrap())
    });
}

fn statistics(c: &mut Criterion) {
    let mut rng = GaussianStream::new(3);
    let pos: Vec<f64> = (0..500).map(|_| rng.normal() + 0.5).collect();
    let neg = rng.normal_vec(500);
    c.bench_function("stats/auc/500+500", |b| b.iter(|| auc(black_box(&pos), black_box(&neg)).unwrap()));
    c.bench_function("stats/delong/500+500", |b| b.iter(|| delong_ci(black_box(&pos), black_box(&neg), 0.95).unwrap()));
}

criterion_group!(benches, metrics, reverse_and_gradient, statistics);
criterion_main!(benches);
