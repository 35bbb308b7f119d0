use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geovit::data::{ambiguity_sites, generate_dataset, TileRecord};
use geovit::harness::{build_model, evaluate, RunConfig};
use geovit::kernels::gemm_nn;
use geovit::par::{self, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn gemm(c: &mut Criterion) {
    let (m, k, n) = (256, 256, 256);
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
    let mut group = c.benchmark_group("gemm_256");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_kernel_execution(exec);
            bench.iter(|| {
                let mut out = vec![0.0; m * n];
                gemm_nn(&a, &b, &mut out, m, k, n);
                out
            });
        });
    }
    par::set_kernel_execution(Execution::default());
    group.finish();
}

fn dataset(c: &mut Criterion) {
    let specs = ambiguity_sites([8, 2, 2], 64);
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| generate_dataset(&specs, 1, true, exec).unwrap());
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let tiles = generate_dataset(&ambiguity_sites([4, 1, 1], 32), 2, true, Execution::Sequential).unwrap();
    let refs: Vec<&TileRecord> = tiles.iter().collect();
    let config = RunConfig {
        pyramid_channels: 16,
        loc_hidden: 16,
        img_size: 32,
        ..RunConfig::default()
    };
    let (model, store) = build_model(&config, 32).unwrap();
    let mut group = c.benchmark_group("evaluate_6_tiles");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| evaluate(&model, &store, &refs, exec).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, dataset, inference);
criterion_main!(benches);
