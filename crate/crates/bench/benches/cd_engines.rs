use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use guidedquant::lnq::{run_cd, CdWorkspace};
use guidedquant::CdEngine;
use guidedquant_bench::cd_instance;

fn engines(c: &mut Criterion) {
    let mut group = c.benchmark_group("cd_cycle");
    group.sample_size(10);
    for d in [64, 256] {
        let (h, w, init) = cd_instance(d, 16, 3, 1);
        for (engine, batch) in [
            (CdEngine::Naive, 1),
            (CdEngine::ClosedForm, 1),
            (CdEngine::Precompute, 1),
            (CdEngine::LazyBatch, 32),
            (CdEngine::LazyBatch, 128),
        ] {
            let label = if engine == CdEngine::LazyBatch {
                format!("{}_{batch}", engine.as_str())
            } else {
                engine.as_str().to_string()
            };
            group.bench_with_input(BenchmarkId::new(label, d), &d, |b, _| {
                b.iter(|| {
                    let mut ws = CdWorkspace::new(&h).unwrap();
                    let mut s = init.clone();
                    run_cd(&h, &mut ws, &w, &mut s, 1, engine, batch).unwrap();
                    s
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, engines);
criterion_main!(benches);
