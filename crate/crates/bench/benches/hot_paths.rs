use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2ut_core::autodiff::{CtcTarget, Graph, Segment, Tensor};
use s2ut_core::data::{generate_dataset, TaskSpec};
use s2ut_core::decoding::{beam_search, greedy_decode, ModelScorer};
use s2ut_core::model::{MtpVariant, S2utModel};
use s2ut_core::training::{RunConfig, Trainer};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn train_step(c: &mut Criterion) {
    let data = generate_dataset(&TaskSpec::default()).expect("default task");
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for v in MtpVariant::ALL {
        let mut cfg = RunConfig::default();
        cfg.model.mtp_variant = v;
        let mut t = Trainer::new(cfg).expect("default config");
        group.bench_function(BenchmarkId::from_parameter(v), |b| {
            b.iter(|| t.train_step(&data.train).expect("step"))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (t, d) = (120, 64);
    let segs: Vec<Segment> = (0..4).map(|i| Segment::new(i * t / 4, t / 4)).collect();
    let (q, k, v) = (random(t, d, 1), random(t, d, 2), random(t, d, 3));
    c.bench_function("attention_fwd_bwd_120x64_4heads", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (q, k, v) = (
                g.leaf(q.clone(), true),
                g.leaf(k.clone(), true),
                g.leaf(v.clone(), true),
            );
            let o = g.attention(q, k, v, &segs, &segs, 4, true).expect("attention");
            let s = g.sum(o);
            g.backward(s).expect("backward");
            black_box(g.grad(q).map(|x| x[0]))
        })
    });
}

fn ctc(c: &mut Criterion) {
    let (frames, vocab) = (40, 44);
    let logits = random(frames * 8, vocab, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let targets: Vec<CtcTarget> = (0..8)
        .map(|i| CtcTarget {
            frames: Segment::new(i * frames, frames),
            labels: (0..8).map(|_| rng.gen_range(1..vocab)).collect(),
        })
        .collect();
    c.bench_function("ctc_fwd_bwd_8x40_frames", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(logits.clone(), true);
            let lp = g.log_softmax_rows(x);
            let (l, _) = g.ctc(lp, &targets, 0).expect("ctc");
            g.backward(l).expect("backward");
            black_box(g.scalar(l))
        })
    });
}

fn decode(c: &mut Criterion) {
    let spec = TaskSpec::default();
    let data = generate_dataset(&spec).expect("default task");
    let mut cfg = RunConfig::default();
    cfg.model.mtp_variant = MtpVariant::S2ut;
    let model = S2utModel::new(cfg.model, 1).expect("default model");
    let sample = &data.test[0];
    let scorer = ModelScorer::new(&model, sample).expect("scorer");
    let max_len = 40;
    let mut group = c.benchmark_group("decode_40_steps");
    group.sample_size(20);
    group.bench_function("greedy", |b| {
        b.iter(|| greedy_decode(&scorer, max_len).expect("greedy"))
    });
    for beam in [5, 10] {
        group.bench_function(BenchmarkId::new("beam", beam), |b| {
            b.iter(|| beam_search(&scorer, beam, max_len, false).expect("beam"))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, attention, ctc, decode);
criterion_main!(benches);
