//! Default thread pool against a single worker for the data-parallel hot
//! paths. Build with `--no-default-features` to time the sequential fallback.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cellpipe::attention::{self, AttentionConfig, FeatureMap};
use cellpipe::dataset::{render_fixture_sample, ClassLabel};
use cellpipe::par;
use cellpipe::rng::SplitMix64;
use cellpipe::segmentation::{self, SegMethod, SegmentParams};
use cellpipe::trainer::{self, Example, ModelParams};

const POOLS: [(&str, usize); 2] = [("default", 0), ("1-thread", 1)];

fn qkv(n: usize, side: usize) -> [FeatureMap; 3] {
    let mut rng = SplitMix64::new(1);
    let mut make = || FeatureMap::random(n, 2, 16, &mut rng).unwrap().with_spatial(side, side).unwrap();
    [make(), make(), make()]
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    let [q, k, v] = qkv(1024, 32);
    let cfg = AttentionConfig::default();
    for (name, jobs) in POOLS {
        group.bench_function(BenchmarkId::new("full", name), |b| {
            b.iter(|| par::with_jobs(jobs, || attention::full_attention(&q, &k, &v, 0.25).unwrap()))
        });
        group.bench_function(BenchmarkId::new("area-l4", name), |b| {
            b.iter(|| par::with_jobs(jobs, || attention::area_attention(&q, &k, &v, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_segmentation(c: &mut Criterion) {
    let mut group = c.benchmark_group("segmentation");
    group.sample_size(10);
    let images: Vec<_> = ClassLabel::ALL
        .iter()
        .flat_map(|&l| (0..8).map(move |i| render_fixture_sample(l, i, 0, 128).image))
        .collect();
    let params = SegmentParams::default();
    for method in [SegMethod::ALL[0], SegMethod::ALL[3]] {
        for (name, jobs) in POOLS {
            group.bench_function(BenchmarkId::new(method.variant_name(), name), |b| {
                b.iter(|| {
                    par::with_jobs(jobs, || {
                        par::map(&images, |img| segmentation::segment(black_box(img), method, &params).unwrap())
                    })
                })
            });
        }
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    let batch: Vec<Example> = (0..128)
        .map(|i| {
            let label = ClassLabel::ALL[i % 5];
            Example {
                features: trainer::featurize(&render_fixture_sample(label, i, 0, 128).image),
                label: label.ordinal(),
            }
        })
        .collect();
    let params = ModelParams::zeros(5, batch[0].features.len());
    for (name, jobs) in POOLS {
        group.bench_function(BenchmarkId::new("batch-128", name), |b| {
            b.iter(|| par::with_jobs(jobs, || trainer::loss_and_grad(&params, black_box(&batch), 1e-4)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_attention, bench_segmentation, bench_gradient);
criterion_main!(benches);
