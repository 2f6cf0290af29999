use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use moechip::placement::{allocate_exact, cluster_experts, place_layer, AllocationMode};
use moechip::profiling::profile_layer;
use moechip::sim::{self, Method};
use moechip::trace::generate_trace;
use moechip::{account_all_to_all, ReplicaPolicy, TokenSource, TraceGenConfig};
use moechip_bench::fixture;

fn trace_and_profile(c: &mut Criterion) {
    let (model, _, _, trace) = fixture("qwen3-30b-a3b", 4, 128);
    let cfg = TraceGenConfig {
        seed: 2,
        skew: 0.5,
        n_collab_groups: 16,
        collab_strength: 0.9,
        n_tokens: 4096,
    };
    c.bench_function("generate_trace/qwen3_4x4096", |b| {
        b.iter(|| generate_trace(black_box(&model), black_box(&cfg)).unwrap())
    });
    c.bench_function("profile_layer/qwen3_4096", |b| {
        b.iter(|| profile_layer(black_box(&trace), 0).unwrap())
    });
    let bytes = trace.to_bytes();
    c.bench_function("trace_parse/qwen3_4x4096", |b| {
        b.iter(|| moechip::RoutingTrace::from_bytes(black_box(&bytes)).unwrap())
    });
}

fn placement(c: &mut Criterion) {
    let (_, hw, _, trace) = fixture("qwen3-30b-a3b", 1, 128);
    let p = profile_layer(&trace, 0).unwrap();
    c.bench_function("cluster_experts/128_into_16", |b| {
        b.iter(|| cluster_experts(black_box(&p.c), 16).unwrap())
    });
    let loads: Vec<u64> = (0..16u64).map(|i| 1000 + (i * 7919) % 503).collect();
    c.bench_function("allocate_exact/16_into_4", |b| {
        b.iter(|| allocate_exact(black_box(&loads), 4).unwrap())
    });
    for mode in [AllocationMode::Exact, AllocationMode::Greedy] {
        c.bench_function(&format!("place_layer/{mode:?}"), |b| {
            b.iter(|| place_layer(black_box(&p), &hw, mode).unwrap())
        });
    }
    let layout = place_layer(&p, &hw, AllocationMode::Exact).unwrap().0;
    c.bench_function("account_all_to_all/qwen3_4096", |b| {
        b.iter(|| {
            account_all_to_all(
                black_box(&trace),
                &layout,
                0,
                TokenSource::AttentionChiplet,
                ReplicaPolicy::CoLocated,
                4096,
            )
            .unwrap()
        })
    });
}

fn simulation(c: &mut Criterion) {
    let (model, hw, run, trace) = fixture("qwen3-30b-a3b", 48, 128);
    let baseline = sim::baseline_layouts(&model, &hw).unwrap();
    let optimized = sim::optimized_layouts(&trace, &hw, AllocationMode::Exact).unwrap();
    let mut group = c.benchmark_group("simulate_step/qwen3_seq128");
    group.sample_size(10);
    for method in Method::ALL {
        let layouts = if method.optimized_layout() {
            &optimized
        } else {
            &baseline
        };
        let run = run.with_method(method);
        group.bench_function(method.as_str(), |b| {
            b.iter_batched(
                || (),
                |_| {
                    sim::simulate_step(&model, &hw, &run, layouts, &trace)
                        .unwrap()
                        .report
                        .latency_s
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, trace_and_profile, placement, simulation);
criterion_main!(benches);
