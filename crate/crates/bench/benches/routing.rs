use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use covi::cost::{compose_batch_cost, NearEdgeProfiles, ProfilePoint};
use covi::trace::synth::{synthesize_trace_set, CalibrationTargets, ExpertQuality, TraceSetSpec};
use covi::wire::{decode, encode, Message, OffloadRequest, RequestBody};
use covi::{collaborative_infer, route_sample, AggregationMode, CommModel, CostProfile, DomainSet, PartitionMap};

fn partition(s: usize) -> PartitionMap {
    let assignment = (0..100).map(|c| (c % s) as u16 + 1).collect();
    PartitionMap::from_assignment(assignment, s).unwrap()
}

fn traces(pm: &PartitionMap, m: usize) -> covi::TraceSet {
    let spec = TraceSetSpec {
        num_samples: m,
        edge: CalibrationTargets::deit3h_cifar100(),
        expert: ExpertQuality::default(),
        generalist: None,
    };
    synthesize_trace_set(&spec, pm, 2, 1).unwrap()
}

fn gate(c: &mut Criterion) {
    let pm = partition(4);
    let ts = traces(&pm, 1000);
    c.bench_function("route_sample/100 classes", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % 1000;
            route_sample(black_box(ts.edge.row(i)), 0.9, 2, &pm).unwrap()
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("collaborative_infer");
    g.sample_size(20);
    for s in [4, 8] {
        let pm = partition(s);
        let ts = traces(&pm, 10_000);
        g.throughput(Throughput::Elements(10_000));
        g.bench_with_input(BenchmarkId::new("S", s), &ts, |b, ts| {
            b.iter(|| collaborative_infer(ts, &pm, 0.9, 2).unwrap())
        });
    }
    g.finish();
}

fn frames(c: &mut Criterion) {
    let msg = Message::Request(OffloadRequest {
        request_id: 1,
        body: RequestBody::TraceIndex(42),
        topk: vec![3, 17],
    });
    let bytes = encode(&msg).unwrap();
    c.bench_function("frame/encode", |b| b.iter(|| encode(black_box(&msg)).unwrap()));
    c.bench_function("frame/decode", |b| b.iter(|| decode(black_box(&bytes)).unwrap()));
}

fn cost(c: &mut Criterion) {
    let point = |batch, latency_ms| ProfilePoint {
        batch,
        latency_ms,
        energy_mj: latency_ms * 7.0,
    };
    let edge = CostProfile::new("orin-nano", "DeiT-3H", vec![point(1, 8.0), point(10, 45.5), point(64, 250.0)]).unwrap();
    let near = NearEdgeProfiles::shared(
        CostProfile::new("agx-orin", "DeiT-6H", vec![point(1, 5.0), point(10, 27.6), point(64, 150.0)]).unwrap(),
    );
    let comm = CommModel {
        rtt_ms: 5.0,
        per_sample_ms: 0.5,
        per_sample_mj: 2.0,
    };
    let mut hist = BTreeMap::new();
    hist.insert(DomainSet::new(vec![1, 3]).unwrap(), 3);
    hist.insert(DomainSet::new(vec![2]).unwrap(), 2);
    c.bench_function("compose_batch_cost/monolithic", |b| {
        b.iter(|| compose_batch_cost(10, black_box(&hist), &edge, &near, &comm, AggregationMode::Monolithic).unwrap())
    });
}

criterion_group!(benches, gate, pipeline, frames, cost);
criterion_main!(benches);
