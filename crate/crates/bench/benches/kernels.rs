use std::hint::black_box;
use std::sync::Arc;

use aggspread::closed_forms::heat_semigroup;
use aggspread::kernels::build_convolution;
use aggspread::solver::{Horizon, Solver, SolverState};
use aggspread::{DensityField, InteractionKernel, RadialGrid, SolverConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn gaussian(grid: Arc<RadialGrid>, mass: f64) -> DensityField {
    let d = grid.d() as f64;
    let c = mass / (2.0 * std::f64::consts::PI).powf(d / 2.0);
    DensityField::from_profile(grid, |r| c * (-r * r / 2.0).exp())
}

fn convolution_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("convolution_build");
    group.sample_size(10);
    let kernels = [
        ("newtonian_d3", InteractionKernel::newtonian(3)),
        ("gaussian_d3", InteractionKernel::gaussian(1.0, 3).unwrap()),
        ("bessel_d2", InteractionKernel::bessel(1.0, 2).unwrap()),
    ];
    for (name, kernel) in kernels {
        let grid = Arc::new(RadialGrid::new(kernel.d(), 128, 10.0).unwrap());
        group.bench_function(BenchmarkId::new(name, 128), |b| {
            b.iter(|| build_convolution(black_box(&kernel), grid.clone(), 16).unwrap())
        });
    }
    group.finish();
}

fn convolution_apply(c: &mut Criterion) {
    let kernel = InteractionKernel::gaussian(1.0, 3).unwrap();
    let grid = Arc::new(RadialGrid::new(3, 256, 10.0).unwrap());
    let op = build_convolution(&kernel, grid.clone(), 16).unwrap();
    let u = gaussian(grid, 1.0);
    let mut out = vec![0.0; u.values().len()];
    c.bench_function("convolution_apply/256", |b| b.iter(|| op.apply_into(black_box(u.values()), &mut out)));
}

fn solver_step(c: &mut Criterion) {
    let mut cfg = SolverConfig::new(3, 256, 10.0, Horizon::Time(1.0));
    cfg.kernel = Some(Arc::new(InteractionKernel::gaussian(1.0, 3).unwrap()));
    let mut solver = Solver::new(cfg).unwrap();
    let grid = Arc::new(RadialGrid::new(3, 256, 10.0).unwrap());
    let field = gaussian(grid, 1.0);
    c.bench_function("solver_step/256", |b| {
        b.iter(|| {
            let mut state = SolverState { field: field.clone(), time: 0.0, steps: 0, clipped_mass: 0.0, outflow: 0.0 };
            solver.step(&mut state, 1e-5).unwrap()
        })
    });
}

fn heat(c: &mut Criterion) {
    let mut group = c.benchmark_group("heat_semigroup");
    group.sample_size(10);
    for n in [64, 128] {
        let grid = Arc::new(RadialGrid::new(2, n, 10.0).unwrap());
        let u = gaussian(grid, 1.0);
        group.bench_function(BenchmarkId::from_parameter(n), |b| b.iter(|| heat_semigroup(black_box(&u), 0.5).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, convolution_build, convolution_apply, solver_step, heat);
criterion_main!(benches);
