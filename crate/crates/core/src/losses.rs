//! Losses and divergences over batches of probability rows.
//!
//! Every function takes `n × K` probability (or logit) matrices on a
//! [`Graph`] and returns a length-`n` vector of per-example values unless the
//! name says otherwise, so callers can weight examples before averaging.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// One probability distribution over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("not a probability vector: {p:?}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(ProbVector(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Shannon entropy in nats, with `0 · log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Stacks probability vectors of equal length into an `n × K` tensor.
pub fn stack(rows: &[ProbVector]) -> Result<Tensor> {
    Tensor::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())
}

/// Per-row entropies of a probability matrix.
pub fn row_entropies(probs: &Tensor) -> Vec<f64> {
    let cols = probs.shape().last().copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks(cols)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}

fn floored_log(g: &Graph, p: Var) -> Result<Var> {
    g.log(g.clamp(p, PROB_FLOOR, f64::INFINITY)?)
}

fn check_labels(g: &Graph, p: Var, labels: &[usize]) -> Result<()> {
    let shape = g.shape(p)?;
    let classes = shape.get(1).copied().unwrap_or(0);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `−log max(p_y, 1e-12)` per example.
pub fn cross_entropy_per_example(g: &Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, probs, labels)?;
    g.neg(floored_log(g, g.pick(probs, labels)?)?)
}

/// Batch mean of [`cross_entropy_per_example`].
pub fn cross_entropy(g: &Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.mean(cross_entropy_per_example(g, probs, labels)?)
}

/// `H(p) = −Σ_k p_k log p_k` per example.
pub fn entropy(g: &Graph, probs: Var) -> Result<Var> {
    g.neg(g.sum_rows(g.mul(probs, floored_log(g, probs)?)?)?)
}

/// `KL(p ‖ q) = Σ_k p_k log(p_k / q_k)` per example.
pub fn kl_divergence(g: &Graph, p: Var, q: Var) -> Result<Var> {
    let ratio = g.sub(floored_log(g, p)?, floored_log(g, q)?)?;
    g.sum_rows(g.mul(p, ratio)?)
}

/// `‖p − q‖₂²` per example.
pub fn mse_distance(g: &Graph, p: Var, q: Var) -> Result<Var> {
    let d = g.sub(p, q)?;
    g.sum_rows(g.mul(d, d)?)
}

/// Jensen–Shannon divergence `½KL(p‖m) + ½KL(q‖m)`, `m = (p + q) / 2`.
pub fn js_divergence(g: &Graph, p: Var, q: Var) -> Result<Var> {
    let m = g.scale(g.add(p, q)?, 0.5)?;
    let total = g.add(kl_divergence(g, p, m)?, kl_divergence(g, q, m)?)?;
    g.scale(total, 0.5)
}

/// Cross-entropy divergence `−Σ_k p_k log q_k`.
pub fn ce_divergence(g: &Graph, p: Var, q: Var) -> Result<Var> {
    g.neg(g.sum_rows(g.mul(p, floored_log(g, q)?)?)?)
}

/// Boosted cross-entropy from MART (Wang et al., 2020), which this crate
/// takes as an external definition:
/// `−log p_y − log(1 − max_{k≠y} p_k)`, probabilities clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn boosted_cross_entropy_per_example(g: &Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let classes = g.shape(probs)?.get(1).copied().unwrap_or(0);
    if classes < 2 {
        return Err(Error::invalid(format!(
            "boosted cross-entropy needs K ≥ 2, got {classes}"
        )));
    }
    check_labels(g, probs, labels)?;
    let p = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let true_term = g.neg(g.log(g.pick(p, labels)?)?)?;
    let one = g.constant(Tensor::scalar(1.0));
    let runner_up = g.max_except(p, labels)?;
    let wrong_term = g.neg(g.log(g.sub(one, runner_up)?)?)?;
    g.add(true_term, wrong_term)
}

pub fn boosted_cross_entropy(g: &Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.mean(boosted_cross_entropy_per_example(g, probs, labels)?)
}

/// CW margin on logits: `max_{k≠y} z_k − z_y` per example. Positive means
/// misclassified.
pub fn margin(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    g.sub(g.max_except(logits, labels)?, g.pick(logits, labels)?)
}

/// Distance used by the consistency regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    Mse,
    Kl,
    Js,
    Ce,
}

impl Divergence {
    pub const ALL: [Divergence; 4] = [Divergence::Mse, Divergence::Kl, Divergence::Js, Divergence::Ce];

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Mse => "mse",
            Divergence::Kl => "kl",
            Divergence::Js => "js",
            Divergence::Ce => "ce",
        }
    }

    /// `D(reference, other)` per example; `reference` plays the role of the
    /// natural-input distribution (first argument of KL/CE).
    pub fn apply(self, g: &Graph, reference: Var, other: Var) -> Result<Var> {
        match self {
            Divergence::Mse => mse_distance(g, other, reference),
            Divergence::Kl => kl_divergence(g, reference, other),
            Divergence::Js => js_divergence(g, reference, other),
            Divergence::Ce => ce_divergence(g, reference, other),
        }
    }
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Divergence::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown divergence `{s}` (expected mse, kl, js, ce)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn rows(g: &Graph, rows: &[&[f64]]) -> Var {
        g.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    fn values(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).unwrap().data().to_vec()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let p = rows(&g, &[&[0.0, 1.0, 0.0], &[0.25, 0.25, 0.5]]);
        let ce = values(&g, cross_entropy_per_example(&g, p, &[1, 0]).unwrap());
        assert_eq!(ce[0], 0.0);
        assert!(close(ce[1], 4f64.ln()));
        let uniform = rows(&g, &[&[0.1; 10]]);
        assert!(close(
            g.item(cross_entropy(&g, uniform, &[3]).unwrap()).unwrap(),
            10f64.ln()
        ));
        assert!(matches!(
            cross_entropy(&g, p, &[1, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        // floored: p_y = 0 gives -ln(1e-12), not infinity
        let zero = rows(&g, &[&[1.0, 0.0]]);
        assert!(close(
            values(&g, cross_entropy_per_example(&g, zero, &[1]).unwrap())[0],
            -PROB_FLOOR.ln()
        ));
    }

    #[test]
    fn entropy_examples() {
        let g = Graph::new();
        let p = rows(&g, &[&[0.0, 1.0], &[0.5, 0.5]]);
        let h = values(&g, entropy(&g, p).unwrap());
        assert_eq!(h[0], 0.0);
        assert!(close(h[1], LN_2));
        let u = rows(&g, &[&[0.1; 10]]);
        assert!(close(values(&g, entropy(&g, u).unwrap())[0], 10f64.ln()));
        assert!(close(ProbVector::new(vec![0.5, 0.5]).unwrap().entropy(), LN_2));
    }

    #[test]
    fn kl_examples() {
        let g = Graph::new();
        let p = rows(&g, &[&[0.3, 0.7], &[1.0, 0.0], &[0.9, 0.1]]);
        let q = rows(&g, &[&[0.3, 0.7], &[0.5, 0.5], &[0.5, 0.5]]);
        let kl = values(&g, kl_divergence(&g, p, q).unwrap());
        assert_eq!(kl[0], 0.0);
        assert!(close(kl[1], LN_2));
        let forward = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let backward = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!(close(kl[2], forward));
        let rev = values(&g, kl_divergence(&g, q, p).unwrap());
        assert!(close(rev[2], backward));
        assert!((forward - backward).abs() > 0.1);
    }

    #[test]
    fn mse_examples() {
        let g = Graph::new();
        let p = rows(&g, &[&[0.3, 0.7], &[1.0, 0.0], &[0.6, 0.4]]);
        let q = rows(&g, &[&[0.3, 0.7], &[0.0, 1.0], &[0.5, 0.5]]);
        let d = values(&g, mse_distance(&g, p, q).unwrap());
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 2.0);
        assert!(close(d[2], 0.02));
    }

    #[test]
    fn js_and_ce_divergence_examples() {
        let g = Graph::new();
        let p = rows(&g, &[&[0.2, 0.8], &[1.0, 0.0]]);
        let q = rows(&g, &[&[0.2, 0.8], &[0.0, 1.0]]);
        let js = values(&g, js_divergence(&g, p, q).unwrap());
        assert_eq!(js[0], 0.0);
        assert!(close(js[1], LN_2));
        let a = rows(&g, &[&[0.9, 0.1]]);
        let b = rows(&g, &[&[0.4, 0.6]]);
        assert_eq!(
            values(&g, js_divergence(&g, a, b).unwrap()),
            values(&g, js_divergence(&g, b, a).unwrap())
        );
        let ce = values(&g, ce_divergence(&g, a, a).unwrap())[0];
        assert!(close(ce, values(&g, entropy(&g, a).unwrap())[0]));
    }

    #[test]
    fn boosted_cross_entropy_examples() {
        let g = Graph::new();
        let onehot = rows(&g, &[&[0.0, 1.0, 0.0]]);
        assert!(values(&g, boosted_cross_entropy_per_example(&g, onehot, &[1]).unwrap())[0] < 1e-10);
        let uniform = rows(&g, &[&[0.5, 0.5]]);
        assert!(close(
            g.item(boosted_cross_entropy(&g, uniform, &[0]).unwrap()).unwrap(),
            2.0 * LN_2
        ));
        let single = rows(&g, &[&[1.0]]);
        assert!(boosted_cross_entropy(&g, single, &[0]).is_err());
    }

    #[test]
    fn margin_sign_tracks_misclassification() {
        let g = Graph::new();
        let z = rows(&g, &[&[2.0, 1.0, 0.5], &[0.0, 3.0, 1.0]]);
        assert_eq!(values(&g, margin(&g, z, &[0, 0]).unwrap()), vec![-1.0, 3.0]);
    }

    fn random_probs(seed: u64, n: usize, k: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::matrix(n, k, (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        crate::model::softmax_probs(&logits).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        type LossFn = fn(&Graph, Var, Var, &[usize]) -> Result<Var>;
        let cases: [(&str, LossFn); 8] = [
            ("ce", |g, p, _, y| g.sum(cross_entropy_per_example(g, p, y)?)),
            ("entropy", |g, p, _, _| g.sum(entropy(g, p)?)),
            ("kl", |g, p, q, _| g.sum(kl_divergence(g, p, q)?)),
            ("kl_rev", |g, p, q, _| g.sum(kl_divergence(g, q, p)?)),
            ("mse", |g, p, q, _| g.sum(mse_distance(g, p, q)?)),
            ("js", |g, p, q, _| g.sum(js_divergence(g, p, q)?)),
            ("ce_div", |g, p, q, _| g.sum(ce_divergence(g, q, p)?)),
            ("bce", |g, p, _, y| g.sum(boosted_cross_entropy_per_example(g, p, y)?)),
        ];
        for seed in 0..20 {
            let p = random_probs(seed, 3, 4);
            let q = random_probs(seed + 1000, 3, 4);
            let labels = [0, 2, 3];
            for (name, loss) in cases {
                let err = finite_diff_check(
                    |g, x| {
                        let qv = g.constant(q.clone());
                        loss(g, x, qv, &labels)
                    },
                    &p,
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn divergence_ranges(a in proptest::collection::vec(0.0f64..1.0, 3), b in proptest::collection::vec(0.0f64..1.0, 3)) {
            let norm = |v: &Vec<f64>| {
                let s: f64 = v.iter().sum::<f64>() + 3e-3;
                v.iter().map(|x| (x + 1e-3) / s).collect::<Vec<_>>()
            };
            let (pa, pb) = (norm(&a), norm(&b));
            let g = Graph::new();
            let p = rows(&g, &[&pa]);
            let q = rows(&g, &[&pb]);
            let h = values(&g, entropy(&g, p).unwrap())[0];
            prop_assert!((-1e-12..=3f64.ln() + 1e-12).contains(&h));
            prop_assert!(values(&g, kl_divergence(&g, p, q).unwrap())[0] >= -1e-12);
            let js = values(&g, js_divergence(&g, p, q).unwrap())[0];
            prop_assert!((-1e-12..=LN_2 + 1e-12).contains(&js));
            let mse = values(&g, mse_distance(&g, p, q).unwrap())[0];
            prop_assert!((0.0..=2.0).contains(&mse));
            let ce = values(&g, cross_entropy_per_example(&g, p, &[1]).unwrap())[0];
            let bce = values(&g, boosted_cross_entropy_per_example(&g, p, &[1]).unwrap())[0];
            prop_assert!(bce >= ce - 1e-12);
        }
    }
}
