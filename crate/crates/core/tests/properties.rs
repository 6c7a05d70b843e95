use infoat::attacks::{self, AttackConfig, AttackLoss, SpsaConfig};
use infoat::autodiff::Graph;
use infoat::datasets::LabeledDataset;
use infoat::eval::{clean_accuracy, robust_accuracy, AttackKind, AttackSpec};
use infoat::losses::{row_entropies, Divergence};
use infoat::model::{softmax_probs, Architecture, Classifier};
use infoat::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Classifier {
    Classifier::new(
        Architecture::Mlp {
            input: 3,
            hidden: vec![8],
            classes: 3,
        },
        seed,
    )
    .unwrap()
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // include points on the box faces so clipping is exercised
    let data = (0..3 * n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    (Tensor::matrix(n, 3, data).unwrap(), labels)
}

fn all_attacks(c: &Classifier, x: &Tensor, y: &[usize], eps: f64, seed: u64) -> Vec<(&'static str, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pgd = AttackConfig::pgd(eps, 5);
    let info = AttackConfig {
        lambda: 2.5,
        loss: AttackLoss::Info,
        ..pgd.clone()
    };
    let cw = AttackConfig {
        loss: AttackLoss::CwMargin,
        ..pgd.clone()
    };
    let weights = vec![0.5; y.len()];
    let spsa = SpsaConfig {
        batch: 8,
        ..SpsaConfig::default()
    };
    vec![
        ("fgsm", attacks::fgsm(c, x, y, &pgd).unwrap().x_adv),
        ("pgd", attacks::pgd(c, x, y, &pgd, &mut rng).unwrap().x_adv),
        ("cw_pgd", attacks::cw_pgd(c, x, y, &cw, &mut rng).unwrap().x_adv),
        ("info_pgd", attacks::info_pgd(c, x, y, &info, &mut rng).unwrap().x_adv),
        ("trades", attacks::trades_inner(c, x, &pgd, &mut rng).unwrap().x_adv),
        (
            "consistency",
            attacks::consistency_pgd(c, x, y, &pgd, &weights, Divergence::Mse, &mut rng)
                .unwrap()
                .x_adv,
        ),
        ("spsa", attacks::spsa(c, x, y, &pgd, &spsa, &mut rng).unwrap().x_adv),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attacks_stay_in_ball_and_box(seed in any::<u64>(), n in 1usize..6, eps in 0.0f64..0.4) {
        let c = model(seed);
        let (x, y) = batch(n, seed ^ 1);
        for (name, adv) in all_attacks(&c, &x, &y, eps, seed) {
            for (a, b) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= eps + 1e-9, "{name}: moved {}", (a - b).abs());
                prop_assert!((0.0..=1.0).contains(a), "{name}: {a} outside the box");
            }
        }
    }

    #[test]
    fn attacks_are_deterministic(seed in any::<u64>()) {
        let c = model(seed);
        let (x, y) = batch(4, seed);
        let a = all_attacks(&c, &x, &y, 0.1, seed);
        let b = all_attacks(&c, &x, &y, 0.1, seed);
        for ((name, xa), (_, xb)) in a.iter().zip(&b) {
            prop_assert!(xa == xb, "{name} differs between runs");
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-40.0f64..40.0, 4), 1..6)) {
        let logits = Tensor::from_rows(&rows).unwrap();
        let p = softmax_probs(&logits).unwrap();
        for i in 0..rows.len() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for h in row_entropies(&p) {
            prop_assert!((-1e-12..=4f64.ln() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn zero_radius_leaves_accuracy_unchanged(seed in any::<u64>()) {
        let c = model(seed);
        let (x, y) = batch(20, seed);
        let data = LabeledDataset::new(x.into_data(), 3, y, 3, "random").unwrap();
        let clean = clean_accuracy(&c, &data).unwrap();
        let cfg = AttackConfig::pgd(0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in AttackKind::ALL {
            let robust = robust_accuracy(&c, &data, &cfg, AttackSpec::new(kind, Some(3)), &mut rng).unwrap();
            prop_assert_eq!(robust, clean, "{}", kind.name());
        }
    }
}

#[test]
fn second_backward_is_an_error() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let root = g.sum(g.mul(x, x).unwrap()).unwrap();
    assert_eq!(g.backward(root).unwrap().wrt(x).unwrap().data(), &[2.0, 4.0]);
    assert!(g.backward(root).is_err());
}
