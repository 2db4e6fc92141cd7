use std::sync::atomic::AtomicUsize;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rds_deepc::deepc::{gram, WeightedData};
use rds_deepc::lissa::{lissa_solve, GramOperator, HessianOperator};
use rds_deepc::online::{locality_distances, DistanceWeights};
use rds_deepc::sensitivity::sensitivity_report;
use rds_deepc::{DeepcConfig, Exec, HankelSystem, NormalForm, OperatingPoint};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn system(t: usize, seed: u64) -> (HankelSystem, OperatingPoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let h = HankelSystem::from_blocks(mk(5, t), mk(15, t), mk(5, t), mk(15, t), 1, 1).unwrap();
    let op = OperatingPoint {
        u_ini: mk(5, 1).column(0).into_owned(),
        y_ini: mk(5, 1).column(0).into_owned(),
        y_ref: mk(15, 1).column(0).into_owned(),
    };
    (h, op)
}

fn bench_gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram");
    group.sample_size(10);
    for t in [500, 2000] {
        let (h, _) = system(t, 1);
        let data = WeightedData::new(&h, &DeepcConfig::default()).unwrap();
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, t), &data.d, |b, d| b.iter(|| gram(d, exec)));
        }
    }
    group.finish();
}

fn bench_distances(c: &mut Criterion) {
    let mut group = c.benchmark_group("locality_distances");
    let (h, op) = system(4050, 2);
    let w = DistanceWeights::identity(1, 1, 5);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| locality_distances(&h, &op, &w, exec, &AtomicUsize::new(0)).unwrap())
        });
    }
    group.finish();
}

fn bench_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("sensitivity_report");
    group.sample_size(20);
    let (h, op) = system(1000, 3);
    let nf = NormalForm::assemble(&h, &DeepcConfig::default(), &op).unwrap();
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| sensitivity_report(&nf, &h, &op, 30, exec).unwrap()));
    }
    group.finish();
}

fn bench_lissa(c: &mut Criterion) {
    let mut group = c.benchmark_group("lissa_solve");
    let (h, _) = system(200, 4);
    let cfg = DeepcConfig::default();
    let data = WeightedData::new(&h, &cfg).unwrap();
    let op = GramOperator {
        data: &data,
        lambda_g: cfg.lambda_g,
    };
    let v = DVector::from_element(200, 1.0);
    let alpha = 1.0 / op.max_eigen_bound();
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| lissa_solve(&op, &v, alpha, 50, 5, exec).unwrap()));
    }
    group.finish();
}

fn bench_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("step_solve");
    group.sample_size(10);
    let cfg = DeepcConfig::default();
    for t in [60, 1000] {
        let (h, op) = system(t, 5);
        let nf = NormalForm::assemble(&h, &cfg, &op).unwrap();
        group.bench_with_input(BenchmarkId::new("factor_and_solve", t), &t, |b, _| {
            b.iter(|| NormalForm::assemble(&h, &cfg, &op).unwrap().solve_nominal())
        });
        group.bench_with_input(BenchmarkId::new("cached_solve", t), &t, |b, _| b.iter(|| nf.solve_nominal()));
    }
    group.finish();
}

criterion_group!(benches, bench_gram, bench_distances, bench_scores, bench_lissa, bench_solve);
criterion_main!(benches);
