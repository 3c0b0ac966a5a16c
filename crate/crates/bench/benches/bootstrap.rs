use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use skillcal::bootstrap::{self, BootstrapConfig};
use skillcal::estimators::{EstimatorName, EstimatorSpec};
use skillcal_bench::{occupation_sample, occupation_totals, WAVE};

fn bootstrap_replicates(c: &mut Criterion) {
    let sample = occupation_sample(5000, 20, 3);
    let totals = BTreeMap::from([(WAVE, occupation_totals(20, 200_000.0))]);
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    for (label, names) in [
        (
            "B=50 design estimators",
            vec![EstimatorName::Htsrs, EstimatorName::Ecgreg],
        ),
        ("B=10 with LASSO", vec![EstimatorName::Ecgreg, EstimatorName::Eclasso1]),
    ] {
        let replicates = if names.contains(&EstimatorName::Eclasso1) {
            10
        } else {
            50
        };
        let config = BootstrapConfig {
            replicates,
            seed: 9,
            estimators: names.into_iter().map(EstimatorSpec::standard).collect(),
            workers: Some(1),
            ..BootstrapConfig::default()
        };
        group.bench_function(label, |b| {
            b.iter(|| bootstrap::run_bootstrap(&config, &sample, &totals).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bootstrap_replicates);
criterion_main!(benches);
