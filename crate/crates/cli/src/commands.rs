//! Subcommand implementations. Every command writes its resolved config
//! next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use infoat::datasets::{gen_two_moons, load_cifar_bin, load_idx, LabeledDataset};
use infoat::eval::{
    self, clean_accuracy, entropy_robustness_profile, input_loss_surface, load_checkpoint, min_perturbation_profile,
    robust_accuracy, save_checkpoint, weight_loss_surface, AttackKind, AttackSpec, Checkpoint,
};
use infoat::model::Classifier;
use infoat::train::{self, derive_seed, TrainConfig, PROBE_SIZE};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataConfig, DataSource, Experiment};

pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_FILE: &str = "checkpoint.ibat";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// RNG stream for evaluation-time attacks.
const EVAL_STREAM: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Diagnostic {
    Entropy,
    Minpert,
    #[value(name = "surface_input")]
    SurfaceInput,
    #[value(name = "surface_weight")]
    SurfaceWeight,
}

impl Diagnostic {
    pub fn file_name(self) -> &'static str {
        match self {
            Diagnostic::Entropy => "entropy_profile.csv",
            Diagnostic::Minpert => "minpert_profile.csv",
            Diagnostic::SurfaceInput => "surface_input.csv",
            Diagnostic::SurfaceWeight => "surface_weight.csv",
        }
    }
}

/// `(train, test)` for the configured source.
pub fn load_data(cfg: &DataConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut data = match cfg.source {
        DataSource::TwoMoons => gen_two_moons(cfg.n, cfg.noise, cfg.seed)?,
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&cfg.images, &cfg.labels) else {
                bail!("data.source = idx needs data.images and data.labels");
            };
            load_idx(images, labels)?
        }
        DataSource::Cifar => {
            let Some(path) = &cfg.path else {
                bail!("data.source = cifar needs data.path");
            };
            load_cifar_bin(path)?
        }
    };
    if !cfg.classes.is_empty() {
        data = data.filter_classes(&cfg.classes)?;
    }
    if cfg.limit > 0 {
        data = data.take(cfg.limit);
    }
    Ok(data.split(cfg.test_fraction, cfg.seed)?)
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_config(out: &Path, exp: &Experiment) -> Result<()> {
    let path = out.join(CONFIG_FILE);
    fs::write(&path, exp.to_config_string()).with_context(|| format!("writing {}", path.display()))
}

fn eval_subset(exp: &Experiment, test: LabeledDataset) -> LabeledDataset {
    if exp.eval.examples > 0 {
        test.take(exp.eval.examples)
    } else {
        test
    }
}

fn eval_rng(exp: &Experiment) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(exp.eval.seed, EVAL_STREAM))
}

/// Trains one model; returns it with its test split.
fn fit(exp: &Experiment, train_cfg: &TrainConfig, out: &Path) -> Result<(Classifier, LabeledDataset)> {
    let (train_set, test) = load_data(&exp.data)?;
    let arch = exp.model.architecture(train_set.dim(), train_set.num_classes());
    let mut c = Classifier::new(arch, train_cfg.seed)?;
    let probe = test.take(PROBE_SIZE);
    let report = train::train(&mut c, &train_set, &probe, train_cfg)?;
    create_dir(out)?;
    save_checkpoint(&c, &exp.to_config_string(), train_cfg.seed, out.join(CHECKPOINT_FILE))?;
    report.write_csv(out.join(TRAIN_REPORT_FILE))?;
    write_config(out, exp)?;
    Ok((c, test))
}

/// Resolves model geometry against the data so the echoed config is final.
pub fn resolve(mut exp: Experiment) -> Result<Experiment> {
    let (train_set, _) = load_data(&exp.data)?;
    exp.model.resolve(&train_set)?;
    Ok(exp)
}

pub fn cmd_train(exp: Experiment, out: &Path) -> Result<()> {
    let exp = resolve(exp)?;
    info!("training {} for {} epochs", exp.train.objective, exp.train.epochs);
    let (c, test) = fit(&exp, &exp.train, out)?;
    let test = eval_subset(&exp, test);
    info!("clean test accuracy {:.4}", clean_accuracy(&c, &test)?);
    Ok(())
}

/// The checkpoint plus its experiment: `config_text` (if given) replaces
/// the config stored in the checkpoint; overrides apply on top.
pub fn open_checkpoint(
    path: &Path,
    config_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<(Checkpoint, Experiment)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let exp = Experiment::parse(config_text.unwrap_or(&ck.config), overrides)?;
    let exp = resolve(exp)?;
    Ok((ck, exp))
}

fn test_split(exp: &Experiment, c: &Classifier) -> Result<LabeledDataset> {
    let (_, test) = load_data(&exp.data)?;
    if test.dim() != c.architecture().input_width() {
        bail!(
            "data width {} does not match the checkpoint's input width {}",
            test.dim(),
            c.architecture().input_width()
        );
    }
    Ok(eval_subset(exp, test))
}

pub fn cmd_attack(ck: &Checkpoint, exp: &Experiment, out: &Path) -> Result<()> {
    let c = &ck.classifier;
    let test = test_split(exp, c)?;
    let mut rng = eval_rng(exp);
    let base = exp.eval.attack();
    let specs: Vec<AttackSpec> = exp
        .eval
        .kinds
        .iter()
        .map(|s| match (s.kind, s.steps) {
            (AttackKind::Fgsm, _) | (_, Some(_)) => *s,
            (kind, None) => AttackSpec::new(kind, Some(exp.eval.steps)),
        })
        .collect();
    let report = eval::evaluate(c, &test, &base, &specs, &mut rng)?;
    create_dir(out)?;
    report.write_csv(out.join(EVAL_REPORT_FILE))?;
    write_config(out, exp)?;
    for row in &report.rows {
        info!(
            "{}: robust {:.4} (clean {:.4})",
            row.attack, row.robust_accuracy, row.clean_accuracy
        );
    }
    Ok(())
}

pub fn cmd_diagnose(ck: &Checkpoint, exp: &Experiment, which: Diagnostic, out: &Path) -> Result<()> {
    let c = &ck.classifier;
    let test = test_split(exp, c)?;
    let mut rng = eval_rng(exp);
    let cfg = exp.eval.attack();
    let e = &exp.eval;
    create_dir(out)?;
    let path = out.join(which.file_name());
    match which {
        Diagnostic::Entropy => {
            let profile = entropy_robustness_profile(c, &test, &cfg, e.bins, &mut rng)?;
            profile.write_csv(&path)?;
            info!("entropy gap {:?}, p = {:?}", profile.gap, profile.p_value);
        }
        Diagnostic::Minpert => {
            let profile = min_perturbation_profile(c, &test, e.eps_max, e.tol, &mut rng)?;
            profile.write_csv(&path)?;
            info!(
                "spearman {:?}, p = {:?}, {} sentinels",
                profile.spearman, profile.p_value, profile.sentinels
            );
        }
        Diagnostic::SurfaceInput => {
            if e.example_index >= test.len() {
                bail!(
                    "eval.example_index {} out of range for {} test examples",
                    e.example_index,
                    test.len()
                );
            }
            let i = e.example_index;
            let surface = input_loss_surface(c, test.input(i), test.labels()[i], &cfg, e.resolution, &mut rng)?;
            surface.write_csv(&path)?;
        }
        Diagnostic::SurfaceWeight => {
            let idx: Vec<usize> = (0..test.len()).collect();
            let (x, y) = test.gather(&idx);
            let surface = weight_loss_surface(c, &x, &y, &cfg, &e.magnitudes, e.directions, &mut rng)?;
            surface.write_csv(&path)?;
            let within = e.magnitudes.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 2.0;
            info!("flatness within ±{within}: {:.4}", surface.flatness(within));
        }
    }
    write_config(out, exp)?;
    Ok(())
}

/// One row of `ablation.csv`. Failed cells carry the error text and
/// empty accuracies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: usize,
    pub weighting: String,
    pub divergence: String,
    pub outer_reg: String,
    pub mine_tap: usize,
    pub lambda: f64,
    pub beta: f64,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub error: String,
}

pub const ABLATION_HEADER: &str =
    "cell,weighting,divergence,outer_reg,mine_tap,lambda,beta,clean_accuracy,robust_accuracy,error";

/// Grid cells in a fixed order, as training configs.
pub fn grid_cells(exp: &Experiment) -> Vec<TrainConfig> {
    let g = &exp.grid;
    let mut cells = Vec::with_capacity(g.cells());
    for &weighting in &g.weighting {
        for &divergence in &g.divergence {
            for &outer_reg in &g.outer_reg {
                for &mine_tap in &g.mine_tap {
                    for &lambda in &g.lambda {
                        for &beta in &g.beta {
                            let mut t = exp.train.clone();
                            t.lambda = lambda;
                            t.beta = beta;
                            t.ablation.weighting = weighting;
                            t.ablation.divergence = divergence;
                            t.ablation.outer_reg = outer_reg;
                            t.ablation.mine_tap = mine_tap;
                            cells.push(t);
                        }
                    }
                }
            }
        }
    }
    cells
}

fn run_cell(exp: &Experiment, index: usize, cfg: &TrainConfig, out: &Path) -> Result<(f64, f64)> {
    cfg.validate()?;
    let mut cell_exp = exp.clone();
    cell_exp.train = cfg.clone();
    let dir = out.join(format!("cell_{index:03}"));
    let (c, test) = fit(&cell_exp, cfg, &dir)?;
    let test = eval_subset(exp, test);
    let mut rng = eval_rng(exp);
    let spec = AttackSpec::new(AttackKind::Pgd, Some(exp.eval.steps));
    let robust = robust_accuracy(&c, &test, &exp.eval.attack(), spec, &mut rng)?;
    Ok((clean_accuracy(&c, &test)?, robust))
}

pub fn cmd_ablate(exp: Experiment, out: &Path, parallel: bool) -> Result<Vec<AblationRow>> {
    let exp = resolve(exp)?;
    create_dir(out)?;
    let cells = grid_cells(&exp);
    info!("ablation over {} cells", cells.len());
    let run = |(i, cfg): (usize, &TrainConfig)| {
        let result = run_cell(&exp, i, cfg, out);
        if let Err(e) = &result {
            warn!("cell {i} failed: {e:#}");
        }
        let (clean, robust, error) = match result {
            Ok((c, r)) => (Some(c), Some(r), String::new()),
            Err(e) => (None, None, format!("{e:#}")),
        };
        AblationRow {
            cell: i,
            weighting: cfg.ablation.weighting.to_string(),
            divergence: cfg.ablation.divergence.name().to_string(),
            outer_reg: cfg.ablation.outer_reg.to_string(),
            mine_tap: cfg.ablation.mine_tap,
            lambda: cfg.lambda,
            beta: cfg.beta,
            clean_accuracy: clean,
            robust_accuracy: robust,
            error,
        }
    };
    let rows: Vec<AblationRow> = if parallel {
        cells.par_iter().enumerate().map(run).collect()
    } else {
        cells.iter().enumerate().map(run).collect()
    };
    eval::write_rows(out.join(ABLATION_FILE), ABLATION_HEADER, &rows)?;
    write_config(out, &exp)?;
    Ok(rows)
}

/// Reads a config file to text.
pub fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

/// `out` or the default `runs/<command>`.
pub fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(command))
}
