use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;
use posecraft::align::{AlignProblem, TargetSet};
use posecraft::ddim::{AttentionToyPredictor, CondRole, Conditioning, GainProfile, LinearPredictor, NoiseSchedule};
use posecraft::depthsel::{select_depth, DepthSearch};
use posecraft::rsactrl::{rsactrl_attention_with, Qkv};
use posecraft::{synth, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn cond(rng: &mut ChaCha8Rng, role: CondRole, dim: usize) -> Conditioning {
    Conditioning::new(role, (0..dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn objective(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = synth::quadruped(&mut rng, 20).unwrap();
    let truth = synth::random_pose(&mut rng, 20, 0.5, 0.3, 0.1);
    let base = AlignProblem::new(r.skeleton, r.mesh, r.bindings, synth::default_ring(), TargetSet::default(), 0.3).unwrap();
    let targets = synth::render_targets(&mut rng, &base, &truth, 1.0, 0.0).unwrap();
    let mut problem = base.with_targets(targets).unwrap();
    let mut group = c.benchmark_group("align_objective");
    for (name, exec) in MODES {
        problem.execution = exec;
        group.bench_function(name, |b| b.iter(|| black_box(problem.objective(true).unwrap())));
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("rsactrl");
    for tokens in [64, 256] {
        let shape = (8, tokens, 32);
        let mut qkv = || Qkv::new(randn(&mut rng, shape), randn(&mut rng, shape), randn(&mut rng, shape)).unwrap();
        let (art, src) = (qkv(), qkv());
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, tokens), &tokens, |b, _| {
                b.iter(|| black_box(rsactrl_attention_with(&art, &src, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn depth_search(c: &mut Criterion) {
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let linear = LinearPredictor::random(&mut rng, (8, 16, 4), 8, 0.1, GainProfile::default()).unwrap();
    let toy = AttentionToyPredictor::random(&mut rng, 4, 8, 50.0).unwrap();
    let z = randn(&mut rng, (8, 16, 4));
    let (e_p, e_null) = (cond(&mut rng, CondRole::Prompt, 8), cond(&mut rng, CondRole::Null, 8));
    let mut group = c.benchmark_group("select_depth");
    group.sample_size(10);
    for (name, exec) in MODES {
        let search = DepthSearch { execution: exec, ..Default::default() };
        group.bench_function(BenchmarkId::new(name, "linear"), |b| {
            b.iter(|| black_box(select_depth(&linear, &z, &e_p, &e_null, &search, &schedule).unwrap()))
        });
        group.bench_function(BenchmarkId::new(name, "attention-toy"), |b| {
            b.iter(|| black_box(select_depth(&toy, &z, &e_p, &e_null, &search, &schedule).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, objective, attention, depth_search);
criterion_main!(benches);
