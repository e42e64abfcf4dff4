use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use ou_tree::inference::{fit_dense_batch, DenseModel, Mode, ProfileModel, SpectralModel};
use ou_tree::micro::{entropy_distance, spectral_entropy_distance, ModelPair};
use ou_tree::ou::simulate_tips;
use ou_tree::tree::random::random_ultrametric;
use ou_tree::{OUParams, RootMode, SymmetricTreeSpec, Tree};

fn data_for(tree: &Tree, reps: usize) -> Vec<Vec<f64>> {
    let p = OUParams::new(0.0, 0.5, 1.0).unwrap();
    let sims = simulate_tips(tree, &p, RootMode::Random, reps, 1).unwrap();
    (0..reps).map(|r| sims.row(r).iter().copied().collect()).collect()
}

fn dense_profile(c: &mut Criterion) {
    let mut g = c.benchmark_group("dense_profile");
    for n in [256, 512] {
        let tree = random_ultrametric(n, 0.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
        let y = data_for(&tree, 1).remove(0);
        let model = DenseModel::new(&tree, &y).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &model, |b, m| {
            b.iter(|| m.profile(black_box(0.7), Mode::Reml).unwrap())
        });
    }
    g.finish();
}

fn spectral_profile(c: &mut Criterion) {
    let spec = SymmetricTreeSpec::new(vec![32, 128], vec![1.0, 0.5]).unwrap();
    let tree = ou_tree::symtree::build_symmetric_tree(&spec);
    let y = data_for(&tree, 1).remove(0);
    let model = SpectralModel::new(&spec, &y).unwrap();
    c.bench_function("spectral_profile_4096", |b| b.iter(|| model.profile(black_box(0.7), Mode::Reml).unwrap()));
}

fn batch_fit(c: &mut Criterion) {
    let tree = random_ultrametric(128, 0.0, &mut ChaCha8Rng::seed_from_u64(3));
    let data = data_for(&tree, 20);
    let mut g = c.benchmark_group("fit_128_tips_20_datasets");
    g.sample_size(10);
    g.bench_function("batch", |b| b.iter(|| fit_dense_batch(&tree, &data, Mode::Ml).unwrap()));
    g.bench_function("one_by_one", |b| {
        b.iter(|| {
            data.iter()
                .map(|y| ou_tree::inference::fit(y, &tree, Mode::Ml))
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

fn distances(c: &mut Criterion) {
    let t1 = OUParams::new(0.0, 0.3, 1.0).unwrap();
    let t2 = OUParams::new(0.1, 0.6, 0.7).unwrap();
    let tree = random_ultrametric(256, 0.0, &mut ChaCha8Rng::seed_from_u64(4));
    c.bench_function("entropy_distance_256", |b| {
        b.iter(|| entropy_distance(&ModelPair { tree: &tree, theta1: t1, theta2: t2 }).unwrap())
    });
    let spec = SymmetricTreeSpec::new(vec![32, 128], vec![1.0, 0.5]).unwrap();
    c.bench_function("spectral_entropy_distance_4096", |b| {
        b.iter(|| spectral_entropy_distance(&spec, &t1, &t2).unwrap())
    });
}

criterion_group!(benches, dense_profile, spectral_profile, batch_fit, distances);
criterion_main!(benches);
