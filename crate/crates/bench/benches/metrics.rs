use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eaiadd_core::metrics::{compute_eer, corpus_inconsistency_report, ScoreSet};
use eaiadd_core::synthgen::{gen_bundles, SynthConfig};
use eaiadd_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eer(c: &mut Criterion) {
    let mut g = c.benchmark_group("compute_eer");
    for n in [100usize, 10_000, 100_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let scores = ScoreSet::from_pairs((0..n).map(|i| {
            let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
            let shift = if label == Label::Bonafide { 0.5 } else { 0.0 };
            (rng.random_range(-1.0..1.0) + shift, label)
        }));
        g.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| compute_eer(black_box(s)).unwrap())
        });
    }
    g.finish();
}

fn inconsistency(c: &mut Criterion) {
    let bundles = gen_bundles(&SynthConfig::default(), 100, 100).unwrap();
    c.bench_function("corpus_inconsistency_200", |b| {
        b.iter(|| corpus_inconsistency_report(black_box(&bundles)))
    });
}

criterion_group!(benches, eer, inconsistency);
criterion_main!(benches);
