//! Compares the rayon data-parallel hot paths against a single-thread pool,
//! covering the three fan-out sites: adjacency solves, policy scoring, and
//! per-sequence smoothing.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use modeplan::config::{FitConfig, PartitionConfig, PlannerConfig};
use modeplan::partition::{AdjacencyMatrix, SoftmaxPartition};
use modeplan::planner::{policy_distribution, DiscreteMdp};
use modeplan::rslds::inference::e_step_continuous;
use modeplan::rslds::synthetic::{excitation_controls, two_mode_system};
use modeplan::rslds::{simulate, ModePosterior, Sequence, TrajectoryBatch};

fn single_thread_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
}

fn bench_adjacency(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 12;
    let dim = 3;
    let weights = DMatrix::from_fn(k, dim, |_, _| rng.random_range(-2.0..2.0));
    let bias = DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5));
    let partition = SoftmaxPartition::from_joint(
        weights,
        bias,
        DVector::from_element(dim, -1.0),
        DVector::from_element(dim, 1.0),
        2,
    );
    let cfg = PartitionConfig::default();
    let mut group = c.benchmark_group("adjacency");
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| partition.build_adjacency(&cfg).unwrap())
    });
    let pool = single_thread_pool();
    group.bench_function(BenchmarkId::new("pool", "single"), |b| {
        b.iter(|| pool.install(|| partition.build_adjacency(&cfg).unwrap()))
    });
    group.finish();
}

fn bench_policy_scoring(c: &mut Criterion) {
    let k = 6;
    let mut pairs = Vec::new();
    for i in 0..k - 1 {
        pairs.push((i, i + 1));
    }
    let adjacency = AdjacencyMatrix::from_pairs(k, &pairs);
    let cfg = PlannerConfig::default();
    let mdp = DiscreteMdp::lift(&adjacency, &cfg);
    let mut group = c.benchmark_group("policy_scoring");
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            policy_distribution(&mdp, 0, &|_, _| Some(1.0), &cfg, &mut rng)
        })
    });
    let pool = single_thread_pool();
    group.bench_function(BenchmarkId::new("pool", "single"), |b| {
        b.iter(|| {
            pool.install(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                policy_distribution(&mdp, 0, &|_, _| Some(1.0), &cfg, &mut rng)
            })
        })
    });
    group.finish();
}

fn bench_smoothing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = two_mode_system();
    let k = params.num_modes();
    let cfg = FitConfig::default();
    let mut sequences = Vec::new();
    for _ in 0..8 {
        let controls = excitation_controls(120, &mut rng);
        let traj = simulate(&params, &DVector::zeros(params.state_dim()), &controls, &mut rng);
        sequences.push(Sequence::new(traj.observations, controls));
    }
    let posts: Vec<ModePosterior> = sequences
        .iter()
        .map(|s| ModePosterior {
            probs: vec![DVector::from_element(k, 1.0 / k as f64); s.controls().len()],
            pairs: vec![],
        })
        .collect();
    let batch = TrajectoryBatch::new(sequences);
    let mut group = c.benchmark_group("smoothing");
    group.bench_function(BenchmarkId::new("pool", "default"), |b| {
        b.iter(|| e_step_continuous(&params, &batch, &posts, &cfg).unwrap())
    });
    let pool = single_thread_pool();
    group.bench_function(BenchmarkId::new("pool", "single"), |b| {
        b.iter(|| pool.install(|| e_step_continuous(&params, &batch, &posts, &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_adjacency, bench_policy_scoring, bench_smoothing);
criterion_main!(benches);
