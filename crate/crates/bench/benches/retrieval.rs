use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgcl_core::{DenseIndex, Label, LabelFilter, SimMetric, SparseIndex};

const WORDS: &[&str] = &["cat", "dog", "flag", "crowd", "joke", "smile", "fire", "rain", "car", "book", "king", "tree"];

fn dense(n: usize, dim: usize, metric: SimMetric) -> (DenseIndex, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..n).map(|i| if i % 2 == 0 { Label::Hateful } else { Label::Benign }).collect();
    let ids = (0..n as u64).collect();
    let q = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (DenseIndex::from_embeddings(rows, labels, ids, dim, metric).unwrap(), q)
}

fn dense_topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_topk");
    for n in [1_000, 10_000] {
        for (name, metric) in [("cosine", SimMetric::Cosine), ("neg_l2", SimMetric::NegL2)] {
            let (index, q) = dense(n, 256, metric);
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| index.query_topk(black_box(&q), 10, &[], LabelFilter::Any).unwrap())
            });
        }
    }
    group.finish();
}

fn hard_negative(c: &mut Criterion) {
    let (index, q) = dense(10_000, 256, SimMetric::Cosine);
    c.bench_function("hard_negative/10000", |b| {
        b.iter(|| index.hard_negative(black_box(&q), Label::Hateful).unwrap())
    });
}

fn bm25(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let texts: Vec<String> = (0..5_000)
        .map(|_| (0..12).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let ids: Vec<u64> = (0..refs.len() as u64).collect();
    let labels = vec![Label::Benign; refs.len()];
    c.bench_function("bm25_build/5000", |b| b.iter(|| SparseIndex::build(&ids, black_box(&refs), &labels).unwrap()));
    let index = SparseIndex::build(&ids, &refs, &labels).unwrap();
    c.bench_function("bm25_scores/5000", |b| b.iter(|| index.scores(black_box("the cat and the burning flag"))));
}

criterion_group!(benches, dense_topk, hard_negative, bm25);
criterion_main!(benches);
