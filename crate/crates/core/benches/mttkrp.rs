//! Sequential against parallel host backends for construction and MTTKRP.

use std::hint::black_box;

use blco::format::{build_blco_with, BuildOptions};
use blco::mttkrp::mttkrp;
use blco::par::Backend;
use blco::{ConflictResolution, ExecConfig, FactorMatrices};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn backends() -> Vec<(&'static str, Backend)> {
    let mut out = vec![("sequential", Backend::Sequential)];
    #[cfg(feature = "parallel")]
    out.push(("parallel", Backend::Parallel));
    out
}

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [64u64, 2000, 500];
    let coo = blco::fixtures::random_tensor(&mut rng, &dims, 200_000);
    let factors = FactorMatrices::random(&dims, 32, &mut rng);

    let mut build = c.benchmark_group("build");
    build.throughput(Throughput::Elements(coo.nnz() as u64));
    build.sample_size(10);
    for (name, backend) in backends() {
        let opts = BuildOptions { backend, ..BuildOptions::default() };
        build.bench_function(name, |b| b.iter(|| build_blco_with(black_box(&coo), &opts).unwrap()));
    }
    build.finish();

    let (tensor, _) = build_blco_with(&coo, &BuildOptions::default()).unwrap();
    let mut group = c.benchmark_group("mttkrp");
    group.throughput(Throughput::Bytes(tensor.element_bytes()));
    group.sample_size(10);
    for (name, backend) in backends() {
        for (label, strategy) in [
            ("register", ConflictResolution::Register),
            ("hierarchical", ConflictResolution::Hierarchical),
        ] {
            for mode in 0..dims.len() {
                let cfg = ExecConfig { backend, strategy, ..Default::default() };
                let id = BenchmarkId::new(format!("{name}/{label}"), mode + 1);
                group.bench_with_input(id, &mode, |b, &mode| {
                    b.iter(|| mttkrp(&tensor, &factors, mode, &cfg).unwrap())
                });
            }
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
