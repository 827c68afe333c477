//! Latency of the restorer forward pass at the training patch size, plus the
//! level-1 fused attention kernel that dominates it.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use relight_core::rgformer;
use relight_core::rng::stream;
use relight_core::tensor::{self, Tape};
use relight_core::training;
use relight_core::ModelConfig;

fn bench_restore(c: &mut Criterion) {
    let cfg = ModelConfig::compact();
    let params = training::init_model(&cfg, 0);
    let mut rng = stream(0, "bench-data", 0);
    let lq = tensor::rand_uniform(&[64, 64, 3], 0.0, 1.0, &mut rng)
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let z_r = tensor::randn1(cfg.refl_prior_len(), &mut rng);
    let z_l = tensor::randn1(cfg.illum_prior_len(), &mut rng);
    c.bench_function("restore_compact_64x64", |b| {
        b.iter(|| {
            black_box(
                rgformer::restore(&params, black_box(&lq), &z_r, &z_l, &cfg).unwrap(),
            )
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    // Level-1 shape of a compact 64x64 patch: 4096 tokens, width 4.
    let (n, d) = (4096, 4);
    let mut rng = stream(0, "bench-attn", 0);
    let q = tensor::randn(&[n, d], &mut rng);
    let k = tensor::randn(&[n, d], &mut rng);
    let v = tensor::randn(&[n, d], &mut rng);
    let scale = 1.0 / (d as f64).sqrt();
    c.bench_function("attention_fwd_n4096_d4", |b| {
        b.iter(|| {
            let t = Tape::new();
            let qv = t.leaf(q.clone());
            let kv = t.leaf(k.clone());
            let vv = t.leaf(v.clone());
            let (out, _) = tensor::attention(&t, qv, kv, vv, scale, false);
            black_box(t.value(out))
        })
    });
}

fn benches(c: &mut Criterion) {
    bench_restore(c);
    bench_attention(c);
}

criterion_group!(benches_group, benches);
criterion_main!(benches_group);
