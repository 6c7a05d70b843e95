use infoat::attacks::AttackConfig;
use infoat::datasets::{gen_two_moons, LabeledDataset};
use infoat::eval::{evaluate, load_checkpoint, save_checkpoint, AttackSpec};
use infoat::model::{Architecture, Classifier};
use infoat::train::{train, ObjectiveKind, TrainConfig, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moons() -> (LabeledDataset, LabeledDataset) {
    gen_two_moons(400, 0.15, 7).unwrap().split(0.25, 7).unwrap()
}

fn config(objective: ObjectiveKind, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(objective);
    cfg.epochs = epochs;
    cfg.batch_size = 50;
    cfg.lr = 0.05;
    cfg.seed = 3;
    cfg.attack = AttackConfig::pgd(0.05, 3);
    cfg
}

fn fit(objective: ObjectiveKind, epochs: usize) -> (Classifier, TrainReport) {
    let (train_set, test) = moons();
    let mut c = Classifier::new(Architecture::mlp(2, 2), 11).unwrap();
    let report = train(&mut c, &train_set, &test, &config(objective, epochs)).unwrap();
    (c, report)
}

#[test]
fn every_objective_lowers_its_loss() {
    for &objective in ObjectiveKind::ALL {
        let (_, report) = fit(objective, 5);
        assert!(report.batch_losses.iter().all(|l| l.is_finite()), "{objective}");
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first, "{objective}: {first} -> {last}");
    }
}

#[test]
fn training_is_reproducible() {
    let (a, ra) = fit(ObjectiveKind::InfoAt, 2);
    let (b, rb) = fit(ObjectiveKind::InfoAt, 2);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn checkpoint_and_evaluation_round_trip() {
    let (c, report) = fit(ObjectiveKind::At, 3);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.ibat");
    save_checkpoint(&c, "[train]\nobjective = at\n", 3, &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.classifier, c);
    assert_eq!(ck.seed, 3);
    assert!(ck.config.contains("objective = at"));

    let (_, test) = moons();
    let specs: Vec<AttackSpec> = ["fgsm", "pgd10", "cw_pgd10"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let cfg = AttackConfig {
        random_start: false,
        ..AttackConfig::pgd(0.05, 10)
    };
    let eval = |c: &Classifier| evaluate(c, &test, &cfg, &specs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (before, after) = (eval(&c), eval(&ck.classifier));
    assert_eq!(before, after);
    assert_eq!(after.records.len(), test.len());
    for row in &after.rows {
        assert!((0.0..=1.0).contains(&row.robust_accuracy));
        assert!(row.robust_accuracy <= row.clean_accuracy);
    }

    let csv = tmp.path().join("eval.csv");
    after.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("attack,epsilon,steps,examples,clean_accuracy,robust_accuracy\n"));
    assert_eq!(text.lines().count(), 4);

    let report_csv = tmp.path().join("train.csv");
    report.write_csv(&report_csv).unwrap();
    assert_eq!(std::fs::read_to_string(&report_csv).unwrap().lines().count(), 4);
}
