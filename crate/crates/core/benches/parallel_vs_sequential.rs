//! Run twice to compare the two execution modes:
//!
//! ```text
//! cargo bench -p lrdg-core --bench parallel_vs_sequential
//! cargo bench -p lrdg-core --bench parallel_vs_sequential --no-default-features
//! ```
//!
//! Benchmark ids carry the mode so criterion keeps both baselines apart.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lrdg::data::{generate_synthetic, SyntheticDomainSpec};
use lrdg::divergence::{pad, DEFAULT_REG_GRID};
use lrdg::nets::{Classifier, ClassifierSpec};
use lrdg::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn classifier_batch(c: &mut Criterion) {
    let spec = SyntheticDomainSpec::benchmark(4, 8, 0.9);
    let dataset = generate_synthetic(&spec, 0).unwrap();
    let images: Vec<&[f64]> = dataset.domains.iter().flat_map(|d| d.samples.iter().map(|s| s.image.as_slice())).take(32).collect();
    let net = Classifier::new(ClassifierSpec::desk(5, spec.image_shape())).unwrap();
    let params = net.init_params(0);
    c.bench_with_input(BenchmarkId::new("classifier_logits_32", mode()), &images, |b, images| {
        b.iter(|| net.logits_batch(&params, images).unwrap())
    });
}

fn pad_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut draw = |shift: f64| -> Vec<Vec<f64>> { (0..100).map(|_| (0..32).map(|_| rng.gen::<f64>() + shift).collect()).collect() };
    let a = draw(0.0);
    let b = draw(0.1);
    c.bench_function(&format!("pad_reg_grid/{}", mode()), |bench| {
        bench.iter(|| pad(&a, &b, &DEFAULT_REG_GRID, 0, "a|b").unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = classifier_batch, pad_sweep
}
criterion_main!(benches);
