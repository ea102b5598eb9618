use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use flexattn_bench::{matrix, rng, weights};
use flexattn_core::attention::{hierarchical_self_attention, self_attention};
use flexattn_core::selection::top_k;
use flexattn_core::FlopCounter;

const N: usize = 64;
const D: usize = 64;

fn attention_vs_m(c: &mut Criterion) {
    let mut r = rng(0);
    let w = weights(&mut r, D, 4);
    let mut plain = w.clone();
    plain.w_k_prime = None;
    plain.w_v_prime = None;
    let mut g = c.benchmark_group("attention_vs_m");
    for m in [0, 32, 64, 128] {
        let h = matrix(&mut r, N, D);
        let s = matrix(&mut r, m, D);
        g.bench_with_input(BenchmarkId::new("hierarchical", m), &m, |b, _| {
            b.iter(|| {
                hierarchical_self_attention(black_box(&h), &s, &w, true, &mut FlopCounter::new())
                    .unwrap()
            })
        });
        let cat = matrix(&mut r, N + m, D);
        g.bench_with_input(BenchmarkId::new("concat", m), &m, |b, _| {
            b.iter(|| {
                self_attention(black_box(&cat), &plain, true, &mut FlopCounter::new()).unwrap()
            })
        });
    }
    g.finish();
}

fn selection(c: &mut Criterion) {
    let mut r = rng(1);
    let v: Vec<f64> = matrix(&mut r, 1, 576).into_vec();
    c.bench_function("top_k_576_58", |b| b.iter(|| top_k(black_box(&v), 58)));
}

criterion_group!(benches, attention_vs_m, selection);
criterion_main!(benches);
