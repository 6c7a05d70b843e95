//! Robustness evaluation, diagnostics, checkpoints and CSV reports.

pub mod checkpoint;
pub mod diagnostics;
pub mod stats;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::attacks::{self, AttackConfig, AttackLoss, SpsaConfig};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::Classifier;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use diagnostics::{
    entropy_robustness_profile, input_loss_surface, min_perturbation_profile, weight_loss_surface, EntropyProfile,
    InputSurface, MinPertProfile, WeightSurface,
};

/// Examples per forward/attack chunk.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    CwPgd,
    InfoPgd,
    Spsa,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::CwPgd,
        AttackKind::InfoPgd,
        AttackKind::Spsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::CwPgd => "cw_pgd",
            AttackKind::InfoPgd => "info_pgd",
            AttackKind::Spsa => "spsa",
        }
    }
}

/// An attack kind with an optional step count, written `pgd20`,
/// `cw_pgd30`, `spsa100`, `fgsm`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub steps: Option<usize>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, steps: Option<usize>) -> Self {
        AttackSpec { kind, steps }
    }

    /// `base` with this spec's kind and step count applied.
    pub fn config(&self, base: &AttackConfig) -> AttackConfig {
        let mut cfg = base.clone();
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        cfg.loss = match self.kind {
            AttackKind::Fgsm | AttackKind::Pgd | AttackKind::Spsa => AttackLoss::Ce,
            AttackKind::CwPgd => AttackLoss::CwMargin,
            AttackKind::InfoPgd => AttackLoss::Info,
        };
        if self.kind == AttackKind::Fgsm {
            cfg.steps = 1;
            cfg.step_size = cfg.epsilon;
            cfg.random_start = false;
        }
        cfg
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        match self.steps {
            Some(s) if self.kind != AttackKind::Fgsm => write!(f, "{s}"),
            _ => Ok(()),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (head, tail) = s.split_at(s.len() - digits);
        let head = if head == "cw" { "cw_pgd" } else { head };
        let kind = AttackKind::ALL.into_iter().find(|k| k.name() == head);
        let steps = if tail.is_empty() { None } else { tail.parse().ok() };
        match kind {
            Some(AttackKind::Fgsm) if steps.is_some() => {}
            Some(kind) if steps != Some(0) => return Ok(AttackSpec { kind, steps }),
            _ => {}
        }
        let valid: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
        Err(Error::invalid(format!(
            "unknown attack kind `{s}` (valid kinds: {}; PGD-style kinds take an optional step count, e.g. pgd20)",
            valid.join(", ")
        )))
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.div_ceil(EVAL_CHUNK)).map(move |k| (k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(n)).collect())
}

pub fn clean_accuracy(c: &Classifier, data: &LabeledDataset) -> Result<f64> {
    let mut pred = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        pred.extend(c.predict(&data.gather(&idx).0)?);
    }
    Ok(accuracy(&pred, data.labels()))
}

/// Per-example attack success (prediction on `x_adv` differs from the
/// label) for `spec` at the radius of `cfg`.
pub fn attack_success(
    c: &Classifier,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    spec: AttackSpec,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<bool>> {
    let cfg = spec.config(cfg);
    let mut success = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        let (x, y) = data.gather(&idx);
        let out = match spec.kind {
            AttackKind::Fgsm => attacks::fgsm(c, &x, &y, &cfg)?,
            AttackKind::Spsa => attacks::spsa(c, &x, &y, &cfg, &SpsaConfig::default(), rng)?,
            _ => attacks::attack_by_loss(c, &x, &y, &cfg, rng)?,
        };
        success.extend(out.success);
    }
    Ok(success)
}

/// Fraction of examples still classified correctly under `spec`.
pub fn robust_accuracy(
    c: &Classifier,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    spec: AttackSpec,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let success = attack_success(c, data, cfg, spec, rng)?;
    Ok(success.iter().filter(|s| !**s).count() as f64 / data.len() as f64)
}

/// Clean-input entropy of every example.
pub fn clean_entropies(c: &Classifier, data: &LabeledDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        out.extend(losses::row_entropies(&c.probs(&data.gather(&idx).0)?));
    }
    Ok(out)
}

/// One row of `eval_report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub examples: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

pub const EVAL_REPORT_HEADER: &str = "attack,epsilon,steps,examples,clean_accuracy,robust_accuracy";

/// Per-example evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub entropy: f64,
    pub correct: bool,
    /// Success of each attack, in report-row order.
    pub success: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub records: Vec<ExampleRecord>,
}

/// Clean accuracy plus robust accuracy under each attack.
pub fn evaluate(
    c: &Classifier,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    specs: &[AttackSpec],
    rng: &mut (impl Rng + ?Sized),
) -> Result<EvalReport> {
    let entropies = clean_entropies(c, data)?;
    let mut pred = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        pred.extend(c.predict(&data.gather(&idx).0)?);
    }
    let clean = accuracy(&pred, data.labels());
    let mut records: Vec<ExampleRecord> = entropies
        .iter()
        .zip(pred.iter().zip(data.labels()))
        .map(|(&entropy, (p, l))| ExampleRecord {
            entropy,
            correct: p == l,
            success: Vec::new(),
        })
        .collect();
    let mut rows = Vec::with_capacity(specs.len());
    for &spec in specs {
        let success = attack_success(c, data, cfg, spec, rng)?;
        let n = data.len();
        let robust = if n == 0 {
            0.0
        } else {
            success.iter().filter(|s| !**s).count() as f64 / n as f64
        };
        for (r, s) in records.iter_mut().zip(&success) {
            r.success.push(*s);
        }
        rows.push(EvalRow {
            attack: spec.to_string(),
            epsilon: cfg.epsilon,
            steps: spec.config(cfg).steps,
            examples: n,
            clean_accuracy: clean,
            robust_accuracy: robust,
        });
    }
    Ok(EvalReport { rows, records })
}

/// Writes serialisable rows under a fixed header (the header is written
/// even when there are no rows).
pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, header: &str, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, EVAL_REPORT_HEADER, &self.rows)
    }
}

/// Mean CE of `c` on `(x, y)`.
pub(crate) fn mean_cross_entropy(c: &Classifier, x: &Tensor, y: &[usize]) -> Result<f64> {
    let g = crate::autodiff::Graph::new();
    let params = c.bind(&g, false);
    let out = c.forward(&g, &params, g.constant(x.clone()))?;
    g.item(losses::cross_entropy(&g, out.probs, y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_two_moons;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "pgd20".parse::<AttackSpec>().unwrap(),
            AttackSpec::new(AttackKind::Pgd, Some(20))
        );
        assert_eq!(
            "fgsm".parse::<AttackSpec>().unwrap(),
            AttackSpec::new(AttackKind::Fgsm, None)
        );
        assert_eq!(
            "cw30".parse::<AttackSpec>().unwrap(),
            AttackSpec::new(AttackKind::CwPgd, Some(30))
        );
        assert_eq!(
            "info_pgd".parse::<AttackSpec>().unwrap(),
            AttackSpec::new(AttackKind::InfoPgd, None)
        );
        assert_eq!("pgd20".parse::<AttackSpec>().unwrap().to_string(), "pgd20");
        for bad in ["pgdx", "bim10", "pgd0", "fgsm5", ""] {
            let err = bad.parse::<AttackSpec>().unwrap_err().to_string();
            assert!(err.contains("fgsm, pgd, cw_pgd, info_pgd, spsa"), "{err}");
        }
    }

    #[test]
    fn zero_radius_gives_clean_accuracy() {
        let data = gen_two_moons(200, 0.1, 1).unwrap();
        let c = Classifier::new(Architecture::mlp(2, 2), 1).unwrap();
        let clean = clean_accuracy(&c, &data).unwrap();
        let cfg = AttackConfig::pgd(0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in AttackKind::ALL {
            let spec = AttackSpec::new(kind, Some(3));
            assert_eq!(
                robust_accuracy(&c, &data, &cfg, spec, &mut rng).unwrap(),
                clean,
                "{kind:?}"
            );
        }
    }

    #[test]
    fn random_model_is_near_chance() {
        let data = gen_two_moons(1000, 0.1, 2).unwrap();
        let mut accs = Vec::new();
        for seed in 0..20 {
            let c = Classifier::new(Architecture::mlp(2, 2), 100 + seed).unwrap();
            accs.push(clean_accuracy(&c, &data).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn report_rows_and_records() {
        let data = gen_two_moons(100, 0.1, 3).unwrap();
        let c = Classifier::new(Architecture::mlp(2, 2), 3).unwrap();
        let specs = ["fgsm".parse().unwrap(), "pgd5".parse().unwrap()];
        let rep = evaluate(
            &c,
            &data,
            &AttackConfig::pgd(0.05, 10),
            &specs,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.records.len(), 100);
        assert_eq!(rep.rows[0].steps, 1);
        assert_eq!(rep.rows[1].steps, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval_report.csv");
        rep.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(EVAL_REPORT_HEADER));
        assert_eq!(text.lines().count(), 3);
    }
}
