use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use phaselab::field::laplacian;
use phaselab::flatness::{run_iteration, FlatnessOptions};
use phaselab::poisson::ShiftedPoisson;
use phaselab::solver::{newton_refine, SolveConfig};
use phaselab::stability::{morse_index, EigenOptions, StabilityRegion};
use phaselab::toda::solve_toda;
use phaselab::Face;
use phaselab_bench::{borderline_graph, liouville_config, perturbed_kink_1d, tilted_kink};

fn field_kernels(c: &mut Criterion) {
    let u = tilted_kink(20.0, 0.05, 0.3);
    let mut y = vec![0.0; u.values().len()];
    c.bench_function("laplacian 801x801", |b| b.iter(|| laplacian(u.grid(), u.bc(), black_box(u.values()), &mut y)));

    let faces = [[Face::Dirichlet; 2]; 2];
    let p = ShiftedPoisson::new(u.grid(), &faces, 2.0, 1.0).expect("fast solver");
    let rhs: Vec<f64> = u.values().to_vec();
    let mut x = vec![0.0; rhs.len()];
    c.bench_function("shifted poisson 801x801", |b| b.iter(|| p.solve(black_box(&rhs), &mut x)));
}

fn solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("solvers");
    g.sample_size(10);
    let u = perturbed_kink_1d(0.01, 1e-4);
    g.bench_function("newton 1d kink h=0.01", |b| b.iter(|| newton_refine(black_box(&u), &SolveConfig::default()).unwrap()));
    let k = tilted_kink(8.0, 0.05, 0.3);
    g.bench_function("newton 2d tilted kink 321x321", |b| b.iter(|| newton_refine(black_box(&k), &SolveConfig::default()).unwrap()));
    let kink = perturbed_kink_1d(0.01, 0.0);
    let opts = EigenOptions::default();
    g.bench_function("lanczos 12 eigenpairs 1d", |b| b.iter(|| morse_index(black_box(&kink), &StabilityRegion::Whole, &opts).unwrap()));
    g.finish();
}

fn reductions(c: &mut Criterion) {
    let cfg = liouville_config(1.0, 0.1, 100.0);
    c.bench_function("toda liouville two-layer", |b| b.iter(|| solve_toda(black_box(&cfg)).unwrap()));
    let sample = borderline_graph();
    let opts = FlatnessOptions { min_points: 100, ..Default::default() };
    c.bench_function("flatness iteration 24 scales", |b| b.iter(|| run_iteration(black_box(&sample), &opts).unwrap()));
}

criterion_group!(benches, field_kernels, solvers, reductions);
criterion_main!(benches);
