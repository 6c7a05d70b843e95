//! Training objectives (plain CE, AT, TRADES, MART, MART+, InfoAT and its
//! ablations) and the shared SGD loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{self, AttackConfig, AttackLoss};
use crate::autodiff::{Graph, Var};
use crate::datasets::{BatchIterator, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{self, Divergence};
use crate::mine::{self, StatisticsNet};
use crate::model::Classifier;
use crate::optim::{LrSchedule, Sgd};
use crate::tensor::Tensor;

/// Independent seed for stream `stream` of a run seeded with `seed`
/// (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_BATCHES: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_MINE: u64 = 4;

/// Probe-set size for per-epoch tracking.
pub const PROBE_SIZE: usize = 256;
pub const PROBE_PGD_STEPS: usize = 10;

macro_rules! named_enum {
    ($ty:ident, $what:literal, { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $ty::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let valid: Vec<&str> = $ty::ALL.iter().map(|v| v.name()).collect();
                    Error::invalid(format!("unknown {} `{s}` (expected one of {})", $what, valid.join(", ")))
                })
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    PlainCe,
    At,
    Trades,
    Mart,
    MartPlus,
    InfoAt,
}

named_enum!(ObjectiveKind, "objective", {
    PlainCe => "plain_ce",
    At => "at",
    Trades => "trades",
    Mart => "mart",
    MartPlus => "mart_plus",
    InfoAt => "infoat",
});

/// Per-example weight on the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// `H(p(x))`.
    Entropy,
    /// `1 − p_y(x)`.
    OneMinusP,
    None,
    /// One MINE estimate shared by the whole batch.
    Mine,
}

named_enum!(Weighting, "weighting", {
    Entropy => "entropy",
    OneMinusP => "one_minus_p",
    None => "none",
    Mine => "mine",
});

/// Outer entropy regulariser, scaled by β.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OuterReg {
    MinusHAdv,
    PlusHAdv,
    MinusHNat,
    PlusHNat,
    None,
}

named_enum!(OuterReg, "outer regulariser", {
    MinusHAdv => "minus_H_adv",
    PlusHAdv => "plus_H_adv",
    MinusHNat => "minus_H_nat",
    PlusHNat => "plus_H_nat",
    None => "none",
});

/// InfoAT variant switches. The defaults are the method itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub weighting: Weighting,
    pub divergence: Divergence,
    pub outer_reg: OuterReg,
    /// Treat `H(p(x))` (or `1 − p_y(x)`) as a constant in the outer loss.
    pub detach_nat_entropy: bool,
    /// Layer ordinal (1–4) for MINE weighting.
    pub mine_tap: usize,
    /// Critic steps per batch for MINE weighting (warm-started).
    pub mine_steps: usize,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            weighting: Weighting::Entropy,
            divergence: Divergence::Mse,
            outer_reg: OuterReg::MinusHAdv,
            detach_nat_entropy: false,
            mine_tap: 1,
            mine_steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub lambda: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epochs at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Training-time attack. The inner loss follows the objective.
    pub attack: AttackConfig,
    pub ablation: Ablation,
}

impl TrainConfig {
    /// Defaults for `objective`: TRADES λ = 6, MART/MART+ λ = 5,
    /// InfoAT λ = 2.5 and β = 0.2; SGD momentum 0.9, weight decay 3.5e-3.
    pub fn new(objective: ObjectiveKind) -> Self {
        let (lambda, beta) = match objective {
            ObjectiveKind::PlainCe | ObjectiveKind::At => (0.0, 0.0),
            ObjectiveKind::Trades => (6.0, 0.0),
            ObjectiveKind::Mart | ObjectiveKind::MartPlus => (5.0, 0.0),
            ObjectiveKind::InfoAt => (2.5, 0.2),
        };
        TrainConfig {
            objective,
            lambda,
            beta,
            epochs: 40,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 3.5e-3,
            lr_drops: Vec::new(),
            lr_drop_factor: 0.1,
            seed: 0,
            attack: AttackConfig::pgd(8.0 / 255.0, 10),
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "λ and β must be finite and ≥ 0 (λ = {}, β = {})",
                self.lambda, self.beta
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("need lr > 0, momentum in [0, 1), weight decay ≥ 0"));
        }
        if self.ablation.weighting == Weighting::Mine && !(1..=4).contains(&self.ablation.mine_tap) {
            return Err(Error::UnknownTap(format!("#{}", self.ablation.mine_tap)));
        }
        self.attack.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            milestones: self.lr_drops.clone(),
            factor: self.lr_drop_factor,
        }
    }
}

/// Batch-mean loss and its parts: `total = base + reg + entropy`.
pub struct LossParts {
    pub total: Var,
    pub base: Var,
    pub reg: Var,
    pub entropy: Var,
}

/// Builds the outer loss of `cfg.objective` on `g`.
///
/// `batch_weight` is the shared MINE weight, needed only for
/// `weighting = mine`.
pub fn outer_loss(
    g: &Graph,
    c: &Classifier,
    params: &[Var],
    x: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    batch_weight: Option<f64>,
) -> Result<LossParts> {
    let zero = || g.constant(Tensor::scalar(0.0));
    let nat = |g: &Graph| -> Result<Var> { Ok(c.forward(g, params, g.constant(x.clone()))?.probs) };
    let adv = |g: &Graph| -> Result<Var> { Ok(c.forward(g, params, g.constant(x_adv.clone()))?.probs) };
    let lambda = cfg.lambda;

    let (base, reg, entropy) = match cfg.objective {
        ObjectiveKind::PlainCe => (losses::cross_entropy(g, nat(g)?, y)?, zero(), zero()),
        ObjectiveKind::At => (losses::cross_entropy(g, adv(g)?, y)?, zero(), zero()),
        ObjectiveKind::Trades => {
            let (pn, pa) = (nat(g)?, adv(g)?);
            let kl = g.mean(losses::kl_divergence(g, pn, pa)?)?;
            (losses::cross_entropy(g, pn, y)?, g.scale(kl, lambda)?, zero())
        }
        ObjectiveKind::Mart | ObjectiveKind::MartPlus => {
            let (pn, pa) = (nat(g)?, adv(g)?);
            let weight = if cfg.objective == ObjectiveKind::Mart {
                one_minus_true_prob(g, pn, y)?
            } else {
                losses::entropy(g, pn)?
            };
            let kl = g.mul(losses::kl_divergence(g, pn, pa)?, weight)?;
            let reg = g.scale(g.mean(kl)?, lambda)?;
            (losses::boosted_cross_entropy(g, pa, y)?, reg, zero())
        }
        ObjectiveKind::InfoAt => {
            let ab = &cfg.ablation;
            let (pn, pa) = (nat(g)?, adv(g)?);
            let n = y.len();
            let weight = match ab.weighting {
                Weighting::Entropy => losses::entropy(g, pn)?,
                Weighting::OneMinusP => one_minus_true_prob(g, pn, y)?,
                Weighting::None => g.constant(Tensor::vector(vec![1.0; n])),
                Weighting::Mine => {
                    let w = batch_weight.ok_or_else(|| Error::invalid("MINE weighting needs a batch weight"))?;
                    g.constant(Tensor::vector(vec![w; n]))
                }
            };
            let weight = if ab.detach_nat_entropy {
                g.constant((*g.value(weight)?).clone())
            } else {
                weight
            };
            let d = g.mul(weight, ab.divergence.apply(g, pn, pa)?)?;
            let reg = g.scale(g.mean(d)?, lambda)?;
            let (target, sign) = match ab.outer_reg {
                OuterReg::MinusHAdv => (Some(pa), -1.0),
                OuterReg::PlusHAdv => (Some(pa), 1.0),
                OuterReg::MinusHNat => (Some(pn), -1.0),
                OuterReg::PlusHNat => (Some(pn), 1.0),
                OuterReg::None => (None, 0.0),
            };
            let entropy = match target {
                Some(p) => g.scale(g.mean(losses::entropy(g, p)?)?, sign * cfg.beta)?,
                None => zero(),
            };
            (losses::cross_entropy(g, pa, y)?, reg, entropy)
        }
    };
    let total = g.add(g.add(base, reg)?, entropy)?;
    Ok(LossParts {
        total,
        base,
        reg,
        entropy,
    })
}

fn one_minus_true_prob(g: &Graph, probs: Var, y: &[usize]) -> Result<Var> {
    let one = g.constant(Tensor::scalar(1.0));
    g.sub(one, g.pick(probs, y)?)
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub base: f64,
    pub reg: f64,
    pub entropy: f64,
}

/// Optimiser, attack randomness and MINE state for one run.
pub struct Trainer {
    cfg: TrainConfig,
    sgd: Sgd,
    attack_rng: ChaCha8Rng,
    mine: Option<(StatisticsNet, ChaCha8Rng)>,
}

impl Trainer {
    pub fn new(c: &Classifier, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mine = if cfg.objective == ObjectiveKind::InfoAt && cfg.ablation.weighting == Weighting::Mine {
            let (xw, zw) = mine::tap_widths(c, cfg.ablation.mine_tap)?;
            let seed = derive_seed(cfg.seed, STREAM_MINE);
            Some((StatisticsNet::new(xw, zw, seed)?, ChaCha8Rng::seed_from_u64(seed)))
        } else {
            None
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            attack_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ATTACK)),
            mine,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// MINE estimate for this batch, clamped at zero, or `None` when the
    /// configuration does not use one. Batches below the estimator's
    /// minimum size get weight zero.
    fn mine_weight(&mut self, c: &Classifier, x: &Tensor) -> Result<Option<f64>> {
        let Some((net, rng)) = self.mine.as_mut() else {
            return Ok(None);
        };
        if x.dims2()?.0 < mine::MIN_BATCH {
            return Ok(Some(0.0));
        }
        let name = c.layer_tap(self.cfg.ablation.mine_tap)?;
        let z = c.latent(x, &name)?;
        net.train(x, &z, self.cfg.ablation.mine_steps, rng)?;
        Ok(Some(net.bound(x, &z, rng)?.max(0.0)))
    }

    /// Adversarial inputs for the objective's inner maximisation.
    pub fn adversarial_batch(
        &mut self,
        c: &Classifier,
        x: &Tensor,
        y: &[usize],
        batch_weight: Option<f64>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let rng = &mut self.attack_rng;
        let attack = AttackConfig {
            lambda: cfg.lambda,
            ..cfg.attack.clone()
        };
        let out = match cfg.objective {
            ObjectiveKind::PlainCe => return Ok(x.clone()),
            ObjectiveKind::At | ObjectiveKind::Mart | ObjectiveKind::MartPlus => attacks::pgd(c, x, y, &attack, rng)?,
            ObjectiveKind::Trades => attacks::trades_inner(c, x, &attack, rng)?,
            ObjectiveKind::InfoAt => {
                let ab = &cfg.ablation;
                let (probs, entropies) = attacks::clean_entropy(c, x)?;
                let weights = match ab.weighting {
                    Weighting::Entropy => entropies,
                    Weighting::OneMinusP => y.iter().enumerate().map(|(i, &l)| 1.0 - probs.row(i)[l]).collect(),
                    Weighting::None => vec![1.0; y.len()],
                    Weighting::Mine => vec![batch_weight.unwrap_or(0.0); y.len()],
                };
                attacks::consistency_pgd(c, x, y, &attack, &weights, ab.divergence, rng)?
            }
        };
        Ok(out.x_adv)
    }

    /// One SGD step on a batch.
    pub fn step(&mut self, c: &mut Classifier, x: &Tensor, y: &[usize], lr: f64) -> Result<StepStats> {
        let batch_weight = self.mine_weight(c, x)?;
        let x_adv = self.adversarial_batch(c, x, y, batch_weight)?;
        let g = Graph::new();
        let params = c.bind(&g, true);
        let parts = outer_loss(&g, c, &params, x, &x_adv, y, &self.cfg, batch_weight)?;
        let stats = StepStats {
            loss: g.item(parts.total)?,
            base: g.item(parts.base)?,
            reg: g.item(parts.reg)?,
            entropy: g.item(parts.entropy)?,
        };
        let grads = g.backward(parts.total)?;
        let grads = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>>>()?;
        self.sgd.step(c.params_mut(), &grads, lr)?;
        Ok(stats)
    }
}

/// One row of `train_report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub base_loss: f64,
    pub reg_loss: f64,
    pub entropy_loss: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Every step's loss, in order.
    pub batch_losses: Vec<f64>,
}

pub const TRAIN_REPORT_HEADER: &str =
    "epoch,lr,train_loss,base_loss,reg_loss,entropy_loss,clean_accuracy,robust_accuracy";

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::eval::write_rows(path, TRAIN_REPORT_HEADER, &self.epochs)
    }
}

/// Clean and PGD-10 accuracy on `probe`.
fn probe_accuracy(
    c: &Classifier,
    probe: &LabeledDataset,
    attack: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if probe.is_empty() {
        return Ok((0.0, 0.0));
    }
    let x = probe.inputs();
    let y = probe.labels();
    let n = y.len() as f64;
    let clean = c.predict(&x)?.iter().zip(y).filter(|(p, l)| p == l).count() as f64 / n;
    let cfg = AttackConfig {
        steps: PROBE_PGD_STEPS,
        step_size: attack.epsilon / 4.0,
        random_start: true,
        restarts: 1,
        lambda: 0.0,
        loss: AttackLoss::Ce,
        epsilon: attack.epsilon,
    };
    let adv = attacks::pgd(c, &x, y, &cfg, rng)?;
    let robust = adv.success.iter().filter(|s| !**s).count() as f64 / n;
    Ok((clean, robust))
}

/// Trains `c` in place. `probe` (typically [`PROBE_SIZE`] held-out
/// examples) is evaluated after every epoch.
pub fn train(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.dim() != c.architecture().input_width() {
        return Err(Error::WidthMismatch {
            expected: c.architecture().input_width(),
            found: data.dim(),
        });
    }
    let mut trainer = Trainer::new(c, cfg)?;
    let schedule = cfg.schedule();
    let mut batches = BatchIterator::new(data, cfg.batch_size, derive_seed(cfg.seed, STREAM_BATCHES))?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PROBE));
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            batches.reshuffle();
        }
        let lr = schedule.lr_at(epoch);
        let mut sums = [0.0; 4];
        let count = batches.batches_per_epoch();
        for b in 0..count {
            let batch = batches.next_batch()?;
            let stats = match trainer.step(c, &batch.inputs, &batch.labels, lr) {
                Ok(s) => s,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: stats.loss,
                });
            }
            report.batch_losses.push(stats.loss);
            for (s, v) in sums.iter_mut().zip([stats.loss, stats.base, stats.reg, stats.entropy]) {
                *s += v;
            }
        }
        let (clean, robust) = probe_accuracy(c, probe, &cfg.attack, &mut probe_rng)?;
        let k = count as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: sums[0] / k,
            base_loss: sums[1] / k,
            reg_loss: sums[2] / k,
            entropy_loss: sums[3] / k,
            clean_accuracy: clean,
            robust_accuracy: robust,
        };
        log::info!(
            "epoch {} loss {:.4} clean {:.3} robust {:.3}",
            record.epoch,
            record.train_loss,
            clean,
            robust
        );
        report.epochs.push(record);
    }
    Ok(report)
}

fn expect_objective(cfg: &TrainConfig, kind: ObjectiveKind) -> Result<()> {
    if cfg.objective != kind {
        return Err(Error::invalid(format!(
            "expected objective {kind}, config has {}",
            cfg.objective
        )));
    }
    Ok(())
}

pub fn train_at(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    expect_objective(cfg, ObjectiveKind::At)?;
    train(c, data, probe, cfg)
}

pub fn train_trades(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    expect_objective(cfg, ObjectiveKind::Trades)?;
    train(c, data, probe, cfg)
}

pub fn train_mart(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    expect_objective(cfg, ObjectiveKind::Mart)?;
    train(c, data, probe, cfg)
}

pub fn train_mart_plus(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    expect_objective(cfg, ObjectiveKind::MartPlus)?;
    train(c, data, probe, cfg)
}

/// InfoAT, with whatever ablation switches `cfg.ablation` holds.
pub fn train_infoat(
    c: &mut Classifier,
    data: &LabeledDataset,
    probe: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    expect_objective(cfg, ObjectiveKind::InfoAt)?;
    train(c, data, probe, cfg)
}
