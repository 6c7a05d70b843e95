//! L∞ adversarial attacks: FGSM, PGD, the TRADES inner maximisation,
//! InfoPGD, CW-margin PGD, SPSA, and a minimum-perturbation search.
//!
//! Every attack keeps `x_adv` inside `B_ε(x) ∩ [0, 1]^d`: after each step the
//! iterate is projected onto the ε-ball and then clipped to the pixel box.
//! Attacks never modify the classifier.

use rand::Rng;

use crate::autodiff::{sign, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, Divergence};
use crate::model::{argmax_rows, Classifier};
use crate::tensor::Tensor;

/// Loss maximised by the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackLoss {
    Ce,
    KlTrades,
    CwMargin,
    Info,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    /// Weight of the InfoPGD consistency term.
    pub lambda: f64,
    pub restarts: usize,
    pub loss: AttackLoss,
}

impl AttackConfig {
    /// PGD with random start, step size `ε/4` and one restart.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            random_start: true,
            lambda: 0.0,
            restarts: 1,
            loss: AttackLoss::Ce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be finite and ≥ 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size >= 0.0 && self.step_size <= 2.0 * self.epsilon) {
            return Err(Error::invalid(format!(
                "step size {} outside [0, 2ε] for ε = {}",
                self.step_size, self.epsilon
            )));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::invalid("steps and restarts must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Outcome of an attack on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult {
    pub x_adv: Tensor,
    /// Per example: the prediction on `x_adv` differs from the true label
    /// (from the clean prediction, for the label-free TRADES attack).
    pub success: Vec<bool>,
    /// Mean attack loss at each iterate, restarts concatenated.
    pub loss_trajectory: Vec<f64>,
}

/// What the inner loop maximises, per example.
#[derive(Clone, Copy, Debug)]
pub enum AttackObjective<'a> {
    CrossEntropy,
    /// `KL(p(x) ‖ p(x'))` against fixed clean probabilities.
    TradesKl {
        clean_probs: &'a Tensor,
    },
    Margin,
    /// `CE(p(x'), y) + λ · w_i · D(p(x), p(x'))` with `p(x)` and `w` frozen.
    Consistency {
        clean_probs: &'a Tensor,
        weights: &'a [f64],
        lambda: f64,
        divergence: Divergence,
    },
}

impl AttackObjective<'_> {
    /// Per-example objective `[n]` at the input `x` already on `g`.
    pub fn per_example(&self, g: &Graph, c: &Classifier, params: &[Var], x: Var, labels: &[usize]) -> Result<Var> {
        let out = c.forward(g, params, x)?;
        match *self {
            AttackObjective::CrossEntropy => losses::cross_entropy_per_example(g, out.probs, labels),
            AttackObjective::TradesKl { clean_probs } => {
                let clean = g.constant(clean_probs.clone());
                losses::kl_divergence(g, clean, out.probs)
            }
            AttackObjective::Margin => losses::margin(g, out.logits, labels),
            AttackObjective::Consistency {
                clean_probs,
                weights,
                lambda,
                divergence,
            } => {
                let ce = losses::cross_entropy_per_example(g, out.probs, labels)?;
                let clean = g.constant(clean_probs.clone());
                let w = g.constant(Tensor::vector(weights.to_vec()));
                let reg = g.mul(w, divergence.apply(g, clean, out.probs)?)?;
                g.add(ce, g.scale(reg, lambda)?)
            }
        }
    }

    /// Per-example values and, if asked, the input gradient of their sum.
    fn evaluate(
        &self,
        c: &Classifier,
        x: &Tensor,
        labels: &[usize],
        with_grad: bool,
    ) -> Result<(Vec<f64>, Option<Tensor>)> {
        let g = Graph::new();
        let params = c.bind(&g, false);
        let xv = if with_grad {
            g.param(x.clone())
        } else {
            g.constant(x.clone())
        };
        let per_example = self.per_example(&g, c, &params, xv, labels)?;
        let values = g.value(per_example)?.data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attack loss"));
        }
        if !with_grad {
            return Ok((values, None));
        }
        let total = g.sum(per_example)?;
        let grad = g.backward(total)?.wrt(xv)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite("attack gradient"));
        }
        Ok((values, Some(grad)))
    }
}

/// Projects `v` onto `[x − ε, x + ε] ∩ [0, 1]`.
fn project(v: f64, x: f64, eps: f64) -> f64 {
    v.clamp(x - eps, x + eps).clamp(0.0, 1.0)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sign-gradient ascent with per-example radius and step size.
fn projected_ascent<R: Rng + ?Sized>(
    c: &Classifier,
    x: &Tensor,
    labels: &[usize],
    epsilons: &[f64],
    step_sizes: &[f64],
    cfg: &AttackConfig,
    objective: AttackObjective<'_>,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut best_x = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut trajectory = Vec::with_capacity(cfg.restarts * (cfg.steps + 1));

    for _ in 0..cfg.restarts {
        let mut cur = x.clone();
        if cfg.random_start {
            for (i, v) in cur.data_mut().iter_mut().enumerate() {
                let eps = epsilons[i / d];
                let xi: f64 = rng.random_range(-1.0..1.0);
                *v = project(*v + eps * xi, x.data()[i], eps);
            }
        }
        // Best over iterates 1..=T (the starting point is not a candidate).
        let mut run_x = cur.clone();
        let mut run_loss = vec![f64::NEG_INFINITY; n];
        let keep_best = |loss: &[f64], iterate: &Tensor, run_x: &mut Tensor, run_loss: &mut Vec<f64>| {
            for r in 0..n {
                if loss[r] > run_loss[r] {
                    run_loss[r] = loss[r];
                    run_x.data_mut()[r * d..(r + 1) * d].copy_from_slice(iterate.row(r));
                }
            }
        };
        for step in 0..cfg.steps {
            let (loss, grad) = objective.evaluate(c, &cur, labels, true)?;
            let grad = grad.expect("gradient requested");
            if step > 0 {
                keep_best(&loss, &cur, &mut run_x, &mut run_loss);
            }
            trajectory.push(mean(&loss));
            for (i, v) in cur.data_mut().iter_mut().enumerate() {
                let r = i / d;
                *v = project(*v + step_sizes[r] * sign(grad.data()[i]), x.data()[i], epsilons[r]);
            }
        }
        let (loss, _) = objective.evaluate(c, &cur, labels, false)?;
        keep_best(&loss, &cur, &mut run_x, &mut run_loss);
        trajectory.push(mean(&loss));

        for r in 0..n {
            if run_loss[r] > best_loss[r] {
                best_loss[r] = run_loss[r];
                best_x.data_mut()[r * d..(r + 1) * d].copy_from_slice(run_x.row(r));
            }
        }
    }
    Ok((best_x, best_loss, trajectory))
}

fn check_batch(c: &Classifier, x: &Tensor, labels: Option<&[usize]>) -> Result<usize> {
    let (n, _) = x.dims2()?;
    if let Some(labels) = labels {
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} inputs", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: c.num_classes(),
            });
        }
    }
    if let Some(&v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("input value {v} outside [0, 1]")));
    }
    Ok(n)
}

fn misclassified(c: &Classifier, x_adv: &Tensor, reference: &[usize]) -> Result<Vec<bool>> {
    Ok(c.predict(x_adv)?.iter().zip(reference).map(|(p, y)| p != y).collect())
}

fn run(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    objective: AttackObjective<'_>,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    cfg.validate()?;
    let n = check_batch(c, x, Some(y))?;
    let eps = vec![cfg.epsilon; n];
    let alpha = vec![cfg.step_size; n];
    let (x_adv, _, loss_trajectory) = projected_ascent(c, x, y, &eps, &alpha, cfg, objective, rng)?;
    Ok(AdvResult {
        success: misclassified(c, &x_adv, y)?,
        x_adv,
        loss_trajectory,
    })
}

/// One signed gradient step of size ε on the cross-entropy, clipped to the
/// pixel box.
pub fn fgsm(c: &Classifier, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdvResult> {
    cfg.validate()?;
    check_batch(c, x, Some(y))?;
    let (loss, grad) = AttackObjective::CrossEntropy.evaluate(c, x, y, true)?;
    let grad = grad.expect("gradient requested");
    let mut x_adv = x.clone();
    for (v, &gi) in x_adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + cfg.epsilon * sign(gi)).clamp(0.0, 1.0);
    }
    let (after, _) = AttackObjective::CrossEntropy.evaluate(c, &x_adv, y, false)?;
    Ok(AdvResult {
        success: misclassified(c, &x_adv, y)?,
        x_adv,
        loss_trajectory: vec![mean(&loss), mean(&after)],
    })
}

/// PGD on the cross-entropy. Returns, per example, the iterate with the
/// largest loss over all steps and restarts.
pub fn pgd(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    run(c, x, y, cfg, AttackObjective::CrossEntropy, rng)
}

/// TRADES inner maximisation of `KL(p(x) ‖ p(x'))` with `p(x)` held fixed.
pub fn trades_inner(
    c: &Classifier,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    cfg.validate()?;
    let n = check_batch(c, x, None)?;
    let clean_probs = c.probs(x)?;
    let clean_pred = argmax_rows(&clean_probs);
    let eps = vec![cfg.epsilon; n];
    let alpha = vec![cfg.step_size; n];
    let objective = AttackObjective::TradesKl {
        clean_probs: &clean_probs,
    };
    let (x_adv, _, loss_trajectory) = projected_ascent(c, x, &clean_pred, &eps, &alpha, cfg, objective, rng)?;
    Ok(AdvResult {
        success: misclassified(c, &x_adv, &clean_pred)?,
        x_adv,
        loss_trajectory,
    })
}

/// Clean-input probabilities and their per-example entropies `H(p(x))`.
pub fn clean_entropy(c: &Classifier, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let probs = c.probs(x)?;
    let h = losses::row_entropies(&probs);
    Ok((probs, h))
}

/// PGD on `CE(p(x'), y) + λ · w_i · D(p(x), p(x'))` with `p(x)` and the
/// per-example weights `w` fixed for the whole attack.
pub fn consistency_pgd(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    weights: &[f64],
    divergence: Divergence,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    let (n, _) = x.dims2()?;
    if weights.len() != n {
        return Err(Error::invalid(format!("{} weights for {n} inputs", weights.len())));
    }
    let clean_probs = c.probs(x)?;
    let objective = AttackObjective::Consistency {
        clean_probs: &clean_probs,
        weights,
        lambda: cfg.lambda,
        divergence,
    };
    run(c, x, y, cfg, objective, rng)
}

/// InfoPGD: PGD on `CE(p(x'), y) + λ · H(p(x)) · ‖p(x') − p(x)‖²₂`. The
/// entropy weight is computed once from the clean input.
pub fn info_pgd(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    check_batch(c, x, Some(y))?;
    let (_, entropies) = clean_entropy(c, x)?;
    consistency_pgd(c, x, y, cfg, &entropies, Divergence::Mse, rng)
}

/// PGD on the CW margin `max_{k≠y} z_k − z_y`.
pub fn cw_pgd(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    run(c, x, y, cfg, AttackObjective::Margin, rng)
}

/// Dispatches on `cfg.loss`.
pub fn attack_by_loss(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    match cfg.loss {
        AttackLoss::Ce => pgd(c, x, y, cfg, rng),
        AttackLoss::KlTrades => trades_inner(c, x, cfg, rng),
        AttackLoss::CwMargin => cw_pgd(c, x, y, cfg, rng),
        AttackLoss::Info => info_pgd(c, x, y, cfg, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpsaConfig {
    /// Rademacher probe pairs averaged per gradient estimate.
    pub batch: usize,
    pub lr: f64,
    pub delta: f64,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            batch: 128,
            lr: 0.01,
            delta: 0.001,
        }
    }
}

/// SPSA gradient estimate of `f` at `x`:
/// `mean_j (f(x + δv_j) − f(x − δv_j)) / (2δ) · v_j` over Rademacher `v_j`.
pub fn spsa_gradient<F>(f: F, x: &[f64], batch: usize, delta: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if batch == 0 || !(delta > 0.0) {
        return Err(Error::invalid("SPSA needs batch ≥ 1 and δ > 0"));
    }
    let mut grad = vec![0.0; x.len()];
    let mut plus = vec![0.0; x.len()];
    let mut minus = vec![0.0; x.len()];
    for _ in 0..batch {
        let v: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        for i in 0..x.len() {
            plus[i] = x[i] + delta * v[i];
            minus[i] = x[i] - delta * v[i];
        }
        let diff = (f(&plus)? - f(&minus)?) / (2.0 * delta);
        if !diff.is_finite() {
            return Err(Error::NonFinite("spsa loss"));
        }
        for (gi, vi) in grad.iter_mut().zip(&v) {
            *gi += diff * vi;
        }
    }
    for gi in &mut grad {
        *gi /= batch as f64;
    }
    Ok(grad)
}

fn margins(c: &Classifier, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    AttackObjective::Margin.evaluate(c, x, labels, false).map(|(v, _)| v)
}

/// SPSA black-box attack on the CW margin: forward passes only, `cfg.steps`
/// iterations of sign ascent with step `spsa.lr`, each example stopping as
/// soon as it is misclassified.
pub fn spsa(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    spsa: &SpsaConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<AdvResult> {
    if cfg.steps == 0 || !(cfg.epsilon >= 0.0) {
        return Err(Error::invalid("SPSA needs steps ≥ 1 and ε ≥ 0"));
    }
    if spsa.batch == 0 || !(spsa.delta > 0.0) || !(spsa.lr >= 0.0) {
        return Err(Error::invalid("SPSA needs batch ≥ 1, δ > 0, lr ≥ 0"));
    }
    let (n, d) = x.dims2()?;
    check_batch(c, x, Some(y))?;
    let mut cur = x.clone();
    if cfg.random_start {
        for (i, v) in cur.data_mut().iter_mut().enumerate() {
            let xi: f64 = rng.random_range(-1.0..1.0);
            *v = project(*v + cfg.epsilon * xi, x.data()[i], cfg.epsilon);
        }
    }
    let mut done = misclassified(c, &cur, y)?;
    let mut trajectory = Vec::new();

    for _ in 0..cfg.steps {
        let active: Vec<usize> = (0..n).filter(|&r| !done[r]).collect();
        if active.is_empty() {
            break;
        }
        let rows = active.len();
        let base = cur.select_rows(&active)?;
        let labels: Vec<usize> = active.iter().map(|&r| y[r]).collect();
        let mut grad = vec![0.0; rows * d];
        for _ in 0..spsa.batch {
            let v: Vec<f64> = (0..rows * d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut plus = base.clone();
            let mut minus = base.clone();
            for i in 0..rows * d {
                plus.data_mut()[i] += spsa.delta * v[i];
                minus.data_mut()[i] -= spsa.delta * v[i];
            }
            let fp = margins(c, &plus, &labels)?;
            let fm = margins(c, &minus, &labels)?;
            for r in 0..rows {
                let diff = (fp[r] - fm[r]) / (2.0 * spsa.delta);
                for j in 0..d {
                    grad[r * d + j] += diff * v[r * d + j];
                }
            }
        }
        for (k, &r) in active.iter().enumerate() {
            for j in 0..d {
                let i = r * d + j;
                let g = grad[k * d + j] / spsa.batch as f64;
                let v = cur.data()[i] + spsa.lr * sign(g);
                cur.data_mut()[i] = project(v, x.data()[i], cfg.epsilon);
            }
        }
        let after = cur.select_rows(&active)?;
        trajectory.push(mean(&margins(c, &after, &labels)?));
        let preds = c.predict(&after)?;
        for (k, &r) in active.iter().enumerate() {
            if preds[k] != y[r] {
                done[r] = true;
            }
        }
    }
    Ok(AdvResult {
        success: misclassified(c, &cur, y)?,
        x_adv: cur,
        loss_trajectory: trajectory,
    })
}

/// Result of a minimum-perturbation search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MinPerturbation {
    Radius(f64),
    /// No successful attack up to the search limit.
    RobustAtMax,
}

/// Settings for the success oracle used by [`min_perturbation`].
pub const MIN_PERT_STEPS: usize = 20;
pub const MIN_PERT_RESTARTS: usize = 3;

/// Binary search for the smallest ε at which PGD (20 steps, step ε/4,
/// random start, 3 restarts) flips the prediction, to within `tol`.
/// Success is treated as monotone in ε. Examples are searched jointly.
pub fn min_perturbation_batch(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    eps_max: f64,
    tol: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<MinPerturbation>> {
    if !(eps_max > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid("min_perturbation needs eps_max > 0 and tol > 0"));
    }
    let n = check_batch(c, x, Some(y))?;
    let clean_wrong: Vec<bool> = c.predict(x)?.iter().zip(y).map(|(p, l)| p != l).collect();
    let cfg = AttackConfig {
        epsilon: eps_max,
        steps: MIN_PERT_STEPS,
        step_size: eps_max / 4.0,
        random_start: true,
        lambda: 0.0,
        restarts: MIN_PERT_RESTARTS,
        loss: AttackLoss::Ce,
    };
    let mut probe = |rows: &[usize], eps: &[f64]| -> Result<Vec<bool>> {
        let xs = x.select_rows(rows)?;
        let ys: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
        let alpha: Vec<f64> = eps.iter().map(|e| e / 4.0).collect();
        let (adv, _, _) = projected_ascent(c, &xs, &ys, eps, &alpha, &cfg, AttackObjective::CrossEntropy, rng)?;
        misclassified(c, &adv, &ys)
    };

    let mut result = vec![MinPerturbation::RobustAtMax; n];
    let candidates: Vec<usize> = (0..n).filter(|&r| !clean_wrong[r]).collect();
    for r in (0..n).filter(|&r| clean_wrong[r]) {
        result[r] = MinPerturbation::Radius(0.0);
    }
    if candidates.is_empty() {
        return Ok(result);
    }
    let at_max = probe(&candidates, &vec![eps_max; candidates.len()])?;
    let searching: Vec<usize> = candidates
        .iter()
        .zip(&at_max)
        .filter(|(_, &s)| s)
        .map(|(&r, _)| r)
        .collect();
    let mut lo = vec![0.0; searching.len()];
    let mut hi = vec![eps_max; searching.len()];
    while !searching.is_empty() && hi.iter().zip(&lo).any(|(h, l)| h - l > tol) {
        let open: Vec<usize> = (0..searching.len()).filter(|&k| hi[k] - lo[k] > tol).collect();
        let rows: Vec<usize> = open.iter().map(|&k| searching[k]).collect();
        let mids: Vec<f64> = open.iter().map(|&k| 0.5 * (lo[k] + hi[k])).collect();
        let hit = probe(&rows, &mids)?;
        for ((&k, &m), &h) in open.iter().zip(&mids).zip(&hit) {
            if h {
                hi[k] = m;
            } else {
                lo[k] = m;
            }
        }
    }
    for (k, &r) in searching.iter().enumerate() {
        result[r] = MinPerturbation::Radius(hi[k]);
    }
    Ok(result)
}

/// [`min_perturbation_batch`] for a single example (`x` is `1 × d`).
pub fn min_perturbation(
    c: &Classifier,
    x: &Tensor,
    y: usize,
    eps_max: f64,
    tol: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<MinPerturbation> {
    Ok(min_perturbation_batch(c, x, &[y], eps_max, tol, rng)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-class linear model with logits `[w0·x + b0, w1·x + b1]`.
    fn linear(w0: &[f64], w1: &[f64], b: [f64; 2]) -> Classifier {
        let d = w0.len();
        let mut w = Vec::with_capacity(2 * d);
        for i in 0..d {
            w.push(w0[i]);
            w.push(w1[i]);
        }
        Classifier::from_params(
            Architecture::Mlp {
                input: d,
                hidden: vec![],
                classes: 2,
            },
            vec![
                Param {
                    name: "out.weight".into(),
                    value: Tensor::matrix(d, 2, w).unwrap(),
                },
                Param {
                    name: "out.bias".into(),
                    value: Tensor::vector(b.to_vec()),
                },
            ],
        )
        .unwrap()
    }

    fn small_mlp(seed: u64) -> Classifier {
        Classifier::new(
            Architecture::Mlp {
                input: 4,
                hidden: vec![16],
                classes: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn batch(seed: u64, n: usize, d: usize, classes: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    fn assert_in_ball(x: &Tensor, adv: &Tensor, eps: f64) {
        for (a, b) in x.data().iter().zip(adv.data()) {
            assert!((a - b).abs() <= eps + 1e-9, "{a} vs {b}");
            assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn fgsm_zero_radius_is_identity() {
        let c = small_mlp(0);
        let (x, y) = batch(1, 8, 4, 3);
        let out = fgsm(&c, &x, &y, &AttackConfig::pgd(0.0, 1)).unwrap();
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn fgsm_on_linear_model_moves_against_the_margin() {
        // class 0 correct; CE grows along w1 − w0
        let c = linear(&[1.0, -2.0, 0.5], &[-1.0, 1.0, 0.5], [0.0, 0.0]);
        let x = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let out = fgsm(&c, &x, &[0], &AttackConfig::pgd(0.1, 1)).unwrap();
        // sign(w1 − w0) = (−1, +1, 0)
        let expected = [0.4, 0.6, 0.5];
        for (a, e) in out.x_adv.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn dead_gradient_leaves_input_unchanged() {
        let c = Classifier::zeros(Architecture::Mlp {
            input: 3,
            hidden: vec![],
            classes: 2,
        })
        .unwrap();
        let x = Tensor::matrix(1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let out = fgsm(&c, &x, &[1], &AttackConfig::pgd(0.3, 1)).unwrap();
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let c = small_mlp(3);
        let (x, y) = batch(4, 32, 4, 3);
        let cfg = AttackConfig {
            step_size: 0.05,
            random_start: false,
            ..AttackConfig::pgd(0.05, 1)
        };
        let a = pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = fgsm(&c, &x, &y, &cfg).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
        assert_eq!(a.success, b.success);
    }

    #[test]
    fn pgd_reaches_the_box_corner_of_a_linear_objective() {
        let c = linear(&[2.0, -1.0], &[-1.0, 1.5], [0.1, 0.0]);
        let x = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.95, 0.02]).unwrap();
        let cfg = AttackConfig::pgd(0.1, 20);
        let out = pgd(&c, &x, &[0, 0], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        // maximiser of CE for label 0 is x + ε·sign(w1 − w0), clipped to the box
        let expected = [0.4, 0.6, 0.85, 0.12];
        for (a, e) in out.x_adv.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn every_attack_respects_the_constraint_set() {
        let c = small_mlp(7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..5 {
            let (x, y) = batch(seed, 16, 4, 3);
            let cfg = AttackConfig {
                lambda: 2.5,
                ..AttackConfig::pgd(0.1, 5)
            };
            let runs = [
                fgsm(&c, &x, &y, &cfg).unwrap(),
                pgd(&c, &x, &y, &cfg, &mut rng).unwrap(),
                trades_inner(&c, &x, &cfg, &mut rng).unwrap(),
                info_pgd(&c, &x, &y, &cfg, &mut rng).unwrap(),
                cw_pgd(&c, &x, &y, &cfg, &mut rng).unwrap(),
                spsa(
                    &c,
                    &x,
                    &y,
                    &cfg,
                    &SpsaConfig {
                        batch: 4,
                        ..Default::default()
                    },
                    &mut rng,
                )
                .unwrap(),
            ];
            for out in runs {
                assert_in_ball(&x, &out.x_adv, cfg.epsilon);
            }
        }
    }

    #[test]
    fn attacks_are_deterministic_given_seed() {
        let c = small_mlp(11);
        let (x, y) = batch(2, 16, 4, 3);
        let cfg = AttackConfig {
            restarts: 2,
            ..AttackConfig::pgd(0.1, 5)
        };
        let a = pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn info_pgd_with_zero_lambda_is_pgd() {
        let c = small_mlp(12);
        let (x, y) = batch(3, 32, 4, 3);
        let cfg = AttackConfig::pgd(0.1, 10);
        let a = info_pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn info_pgd_weight_comes_from_the_clean_input_only() {
        let c = small_mlp(13);
        let (x, y) = batch(5, 16, 4, 3);
        let cfg = AttackConfig {
            lambda: 3.0,
            ..AttackConfig::pgd(0.1, 10)
        };
        let (_, h) = clean_entropy(&c, &x).unwrap();
        let a = info_pgd(&c, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = consistency_pgd(&c, &x, &y, &cfg, &h, Divergence::Mse, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trades_first_step_kl_is_zero() {
        let c = small_mlp(14);
        let (x, _) = batch(6, 8, 4, 3);
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::pgd(0.1, 3)
        };
        let out = trades_inner(&c, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.loss_trajectory[0], 0.0);
    }

    #[test]
    fn cw_on_linear_model_hits_the_closed_form() {
        let w0 = [1.0, -0.5, 0.25, 2.0];
        let w1 = [-1.0, 0.5, 1.25, -2.0];
        let c = linear(&w0, &w1, [0.0, 0.0]);
        let x = Tensor::matrix(1, 4, vec![0.5; 4]).unwrap();
        let eps = 0.05;
        let out = cw_pgd(
            &c,
            &x,
            &[0],
            &AttackConfig::pgd(eps, 20),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        for i in 0..4 {
            let expected = 0.5 + eps * sign(w1[i] - w0[i]);
            assert!((out.x_adv.data()[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn cw_already_misclassified_succeeds_at_once() {
        let c = linear(&[1.0, 0.0], &[3.0, 0.0], [0.0, 0.0]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let out = cw_pgd(
            &c,
            &x,
            &[0],
            &AttackConfig::pgd(0.01, 5),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(out.loss_trajectory[0] > 0.0);
        assert!(out.success[0]);
    }

    #[test]
    fn spsa_estimate_aligns_with_true_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.3).collect();
        let f = |x: &[f64]| -> Result<f64> { Ok(x.iter().zip(&a).map(|(xi, ai)| ai * xi * xi).sum()) };
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| 2.0 * ai * xi).collect();
        let est = spsa_gradient(f, &x, 128, 1e-3, &mut rng).unwrap();
        let dot: f64 = est.iter().zip(&truth).map(|(p, q)| p * q).sum();
        let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(dot / (norm(&est) * norm(&truth)) > 0.5);
    }

    #[test]
    fn spsa_stops_at_first_misclassification() {
        // margin for label 0 is 0.1 − ... ; one 0.05-step along x0 flips it
        let c = linear(&[1.0, 0.0], &[0.0, 0.0], [-0.45, 0.0]);
        let x = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::pgd(0.3, 100)
        };
        let s = SpsaConfig {
            batch: 16,
            lr: 0.02,
            delta: 1e-3,
        };
        let out = spsa(&c, &x, &[0], &cfg, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(out.success[0]);
        // z0 − z1 = x0 − 0.45 = 0.05 at start; needs three 0.02 steps
        assert_eq!(out.loss_trajectory.len(), 3);
    }

    #[test]
    fn min_perturbation_linear_closed_form() {
        let w0 = [1.0, -0.5, 0.25];
        let w1 = [-0.5, 0.5, 0.75];
        let c = linear(&w0, &w1, [0.0, 0.0]);
        let x = Tensor::matrix(1, 3, vec![0.55, 0.45, 0.5]).unwrap();
        let margin: f64 = (0..3).map(|i| (w0[i] - w1[i]) * x.data()[i]).sum();
        let l1: f64 = (0..3).map(|i| (w0[i] - w1[i]).abs()).sum();
        let truth = margin / l1;
        let found = min_perturbation(&c, &x, 0, 0.25, 1e-3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let MinPerturbation::Radius(r) = found else {
            panic!("expected a radius, got {found:?}");
        };
        assert!((r - truth).abs() <= 1e-3, "{r} vs {truth}");

        // already wrong → 0; unreachable → sentinel
        assert_eq!(
            min_perturbation(&c, &x, 1, 0.25, 1e-3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap(),
            MinPerturbation::Radius(0.0)
        );
        assert_eq!(
            min_perturbation(&c, &x, 0, truth * 0.5, 1e-3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap(),
            MinPerturbation::RobustAtMax
        );
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(0.1, 10).validate().is_ok());
        assert!(AttackConfig {
            step_size: 0.3,
            ..AttackConfig::pgd(0.1, 10)
        }
        .validate()
        .is_err());
        assert!(AttackConfig::pgd(0.1, 0).validate().is_err());
        assert!(AttackConfig {
            restarts: 0,
            ..AttackConfig::pgd(0.1, 1)
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            lambda: -1.0,
            ..AttackConfig::pgd(0.1, 1)
        }
        .validate()
        .is_err());
    }
}
