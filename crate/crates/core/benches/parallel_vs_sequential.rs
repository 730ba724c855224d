use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;

use gpgh::gp::{fit_gp, GpSpec};
use gpgh::kernels::{kernel_matrix_from_points_with, KernelSpec, PointSet};
use gpgh::reduced_bo::{argmin_on_grid, padded_box_grid, CanyonObjective};
use gpgh::Execution;

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn ring(n: usize) -> PointSet {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            [(1.0 + 0.1 * (5.0 * t).sin()) * t.cos(), t.sin()]
        })
        .collect();
    PointSet::from_rows(&rows).unwrap()
}

fn kernel_assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_matrix");
    let spec = KernelSpec::new(0.05).unwrap();
    for n in [200, 800] {
        let ps = ring(n);
        for (name, exec) in POLICIES {
            g.bench_with_input(BenchmarkId::new(name, n), &ps, |b, ps| {
                b.iter(|| kernel_matrix_from_points_with(ps, &spec, exec).unwrap())
            });
        }
    }
    g.finish();
}

fn batch_prediction(c: &mut Criterion) {
    let mut g = c.benchmark_group("gp_predict_batch");
    let train = ring(300);
    let f = DVector::from_iterator(300, train.iter().map(|p| p[0] * p[1]));
    let post = fit_gp(&train, &f, &GpSpec::new(KernelSpec::new(0.05).unwrap(), 1e-6)).unwrap();
    let queries = PointSet::from_rows(
        &(0..4000)
            .map(|i| [-1.5 + 3.0 * (i % 80) as f64 / 79.0, -1.5 + 3.0 * (i / 80) as f64 / 49.0])
            .collect::<Vec<_>>(),
    )
    .unwrap();
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| post.predict_batch(&queries, exec).unwrap()));
    }
    g.finish();
}

fn acquisition_grid(c: &mut Criterion) {
    let mut g = c.benchmark_group("acquisition_grid");
    let obj = CanyonObjective::new(10.0, 50.0).unwrap();
    let seen = ring(60);
    let grid = padded_box_grid(&seen, 201).unwrap();
    let score = |x: &[f64]| CanyonObjective::in_domain(x).then(|| obj.eval(x).unwrap());
    for (name, exec) in POLICIES {
        g.bench_function(name, |b| b.iter(|| argmin_on_grid(&grid, score, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernel_assembly, batch_prediction, acquisition_grid);
criterion_main!(benches);
