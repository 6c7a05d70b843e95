use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use infoat::attacks::{self, AttackConfig};
use infoat::autodiff::Graph;
use infoat::datasets::gen_two_moons;
use infoat::model::{Architecture, Classifier};
use infoat::train::{ObjectiveKind, TrainConfig, Trainer};
use infoat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [32, 128, 256] {
        let (a, b) = (random(n, n, &mut rng), random(n, n, &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
                let y = g.sum(g.matmul(va, vb).unwrap()).unwrap();
                black_box(g.backward(y).unwrap());
            })
        });
    }
    group.finish();
}

fn pgd_step(c: &mut Criterion) {
    let data = gen_two_moons(128, 0.1, 0).unwrap();
    let model = Classifier::new(Architecture::mlp(2, 2), 0).unwrap();
    let (x, y) = data.gather(&(0..128).collect::<Vec<_>>());
    let cfg = AttackConfig::pgd(8.0 / 255.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("pgd_step_mlp256_batch128", |b| {
        b.iter(|| black_box(attacks::pgd(&model, &x, &y, &cfg, &mut rng).unwrap()))
    });
}

fn train_batch(c: &mut Criterion) {
    let data = gen_two_moons(128, 0.1, 0).unwrap();
    let (x, y) = data.gather(&(0..128).collect::<Vec<_>>());
    let mut group = c.benchmark_group("train_batch_mlp256_batch128");
    group.sample_size(20);
    for objective in [ObjectiveKind::At, ObjectiveKind::Trades, ObjectiveKind::InfoAt] {
        let mut model = Classifier::new(Architecture::mlp(2, 2), 0).unwrap();
        let cfg = TrainConfig::new(objective);
        let mut trainer = Trainer::new(&model, &cfg).unwrap();
        group.bench_function(objective.name(), |b| {
            b.iter(|| black_box(trainer.step(&mut model, &x, &y, 0.01).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, pgd_step, train_batch);
criterion_main!(benches);
