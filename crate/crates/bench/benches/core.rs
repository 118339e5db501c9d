use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use osigma_bench::{plane_problem, random_state};
use osigma_core::fock::expectation_kernels;
use osigma_core::solver::minimize_constrained;
use osigma_core::{GapModel, SolverOptions};

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("minimize_constrained");
    group.sample_size(10);
    for n in [33usize, 65] {
        let p = plane_problem(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| minimize_constrained(black_box(p), &SolverOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn gap(c: &mut Criterion) {
    let model = GapModel::new(1.0, 1, 3).unwrap();
    c.bench_function("gap_lhs", |b| {
        b.iter(|| model.gap_lhs(black_box(0.75)).unwrap())
    });
    c.bench_function("solve_gap", |b| {
        b.iter(|| model.solve_gap(black_box(0.05)).unwrap())
    });
    let r2: Vec<f64> = (0..101).map(|i| 0.16 * i as f64 / 100.0).collect();
    c.bench_function("phase_sweep_101", |b| {
        b.iter(|| model.phase_sweep(black_box(&r2)).unwrap())
    });
}

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("expectation_kernels");
    for (modes, n_max) in [(2usize, 4usize), (3, 3)] {
        let (grid, state) = random_state(modes, n_max, 7);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{modes}x{n_max}")),
            &state,
            |b, s| b.iter(|| expectation_kernels(black_box(s), &grid).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, solver, gap, kernels);
criterion_main!(benches);
