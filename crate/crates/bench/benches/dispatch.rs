use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hepinfo_core::protocol::{decode, encode, Message};
use hepinfo_core::scheduler::select_node;
use hepinfo_core::sim::{run, Arrival, Scenario};
use hepinfo_core::{Config, JobSpec, NodeRecord, NodeStatic, ResourceSnapshot};

fn candidates(n: usize) -> Vec<NodeRecord> {
    (0..n)
        .map(|i| NodeRecord {
            static_info: NodeStatic::new(&format!("node{i:03}"), "192.0.0.2", 8, 16 << 30).unwrap(),
            last: ResourceSnapshot::new((i * 37 % 1001) as u32, (i as u64 * 7919) << 20, (i % 5) as u32, 0).unwrap(),
            last_heartbeat_at: 0,
            in_flight: (i % 3) as u32,
        })
        .collect()
}

fn bench_select(c: &mut Criterion) {
    let cfg = Config::default();
    let mut g = c.benchmark_group("select_node");
    for n in [3, 50, 1000] {
        let set = candidates(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &set, |b, set| {
            b.iter(|| select_node(black_box(set).iter(), &cfg))
        });
    }
    g.finish();
}

fn bench_protocol(c: &mut Criterion) {
    let msg = Message::Dispatch {
        job_id: hepinfo_core::JobId(4711),
        spec: JobSpec::new("alice", "/Jugrid/alice/run7", "aliroot -b -q sim.C --events 500").unwrap(),
    };
    let line = encode(&msg);
    c.bench_function("encode dispatch", |b| b.iter(|| encode(black_box(&msg))));
    c.bench_function("decode dispatch", |b| b.iter(|| decode(black_box(&line)).unwrap()));
}

fn bench_sim(c: &mut Criterion) {
    let mut s = Scenario::identical_idle(3, 60_000, Config::default());
    for i in 0..300 {
        s.arrivals.push(Arrival {
            at: 1 + i * 100,
            spec: JobSpec::new("alice", "/Jugrid/alice", "true").unwrap(),
            service_ms: 5_000,
        });
    }
    c.bench_function("sim 3 workers 300 jobs", |b| b.iter(|| run(black_box(&s)).unwrap()));
}

criterion_group!(benches, bench_select, bench_protocol, bench_sim);
criterion_main!(benches);
