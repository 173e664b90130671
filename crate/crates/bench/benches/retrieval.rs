use std::hint::black_box;

use anchorchain_bench::{retriever, synthetic};
use anchorchain_core::RetrievalConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieval");
    for n in [50, 400] {
        let (set, store) = synthetic(n);
        let r = retriever(&store);
        let queries: Vec<&str> = set.qa.iter().map(|q| q.question.as_str()).collect();
        group.bench_with_input(
            BenchmarkId::new("bm25_top100", store.chunks().len()),
            &queries,
            |b, qs| {
                let mut i = 0;
                b.iter(|| {
                    i = (i + 1) % qs.len();
                    black_box(r.search_lexical(qs[i], 100))
                })
            },
        );
        let cfg = RetrievalConfig::default();
        group.bench_with_input(
            BenchmarkId::new("two_stage", store.chunks().len()),
            &queries,
            |b, qs| {
                let mut i = 0;
                b.iter(|| {
                    i = (i + 1) % qs.len();
                    black_box(r.retrieve(qs[i], &cfg).unwrap())
                })
            },
        );
    }
    group.finish();
}

fn bench_index_build(c: &mut Criterion) {
    let (_, store) = synthetic(200);
    c.bench_function("index_build_200_chains", |b| b.iter(|| black_box(retriever(&store))));
}

criterion_group!(benches, bench_retrieval, bench_index_build);
criterion_main!(benches);
