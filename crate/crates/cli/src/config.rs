//! Experiment configuration: INI-style sections of `key = value` lines,
//! overridable from the command line as `--section.key value`.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use infoat::attacks::AttackConfig;
use infoat::datasets::LabeledDataset;
use infoat::eval::AttackSpec;
use infoat::losses::Divergence;
use infoat::model::Architecture;
use infoat::train::{ObjectiveKind, OuterReg, TrainConfig, Weighting};
use ini::Ini;

/// Every accepted key, by section.
const KNOWN: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "source",
            "n",
            "noise",
            "seed",
            "test_fraction",
            "images",
            "labels",
            "path",
            "classes",
            "limit",
        ],
    ),
    (
        "model",
        &["arch", "hidden", "conv", "dense", "channels", "height", "width"],
    ),
    (
        "train",
        &[
            "objective",
            "lambda",
            "beta",
            "epochs",
            "batch_size",
            "lr",
            "momentum",
            "weight_decay",
            "lr_drops",
            "lr_drop_factor",
            "seed",
            "weighting",
            "divergence",
            "outer_reg",
            "detach_nat_entropy",
            "mine_tap",
            "mine_steps",
        ],
    ),
    (
        "attack",
        &["epsilon", "steps", "step_fraction", "random_start", "restarts"],
    ),
    (
        "eval",
        &[
            "kinds",
            "epsilon",
            "steps",
            "step_fraction",
            "random_start",
            "restarts",
            "lambda",
            "examples",
            "seed",
            "bins",
            "eps_max",
            "tol",
            "resolution",
            "example_index",
            "directions",
            "magnitudes",
        ],
    ),
    (
        "grid",
        &["weighting", "divergence", "outer_reg", "mine_tap", "lambda", "beta"],
    ),
];

/// Parses a radius written as a decimal (`0.031`) or a fraction (`8/255`).
pub fn parse_epsilon(s: &str) -> Result<f64> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().with_context(|| format!("bad numerator in `{s}`"))?;
            let den: f64 = den
                .trim()
                .parse()
                .with_context(|| format!("bad denominator in `{s}`"))?;
            if den == 0.0 {
                bail!("zero denominator in `{s}`");
            }
            num / den
        }
        None => s
            .parse()
            .with_context(|| format!("`{s}` is not a number or a fraction"))?,
    };
    if !(value.is_finite() && value >= 0.0) {
        bail!("radius `{s}` must be finite and non-negative");
    }
    Ok(value)
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(T::from_str)
        .collect()
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    TwoMoons,
    Idx,
    Cifar,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::TwoMoons => "two_moons",
            DataSource::Idx => "idx",
            DataSource::Cifar => "cifar",
        }
    }
}

impl FromStr for DataSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        [DataSource::TwoMoons, DataSource::Idx, DataSource::Cifar]
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| anyhow!("unknown data source `{s}` (expected two_moons, idx, cifar)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Two-moons sample count.
    pub n: usize,
    pub noise: f64,
    /// Seeds generation and the train/test split.
    pub seed: u64,
    pub test_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub path: Option<PathBuf>,
    /// Keep only these classes (relabelled in order); empty keeps all.
    pub classes: Vec<usize>,
    /// Keep the first `limit` examples before splitting; 0 keeps all.
    pub limit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    SmallConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub conv: [usize; 2],
    pub dense: usize,
    /// Image geometry for `smallconv`; 0 means infer from the data.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    /// Fills in inferred image geometry.
    pub fn resolve(&mut self, data: &LabeledDataset) -> Result<()> {
        if self.arch != ArchKind::SmallConv {
            return Ok(());
        }
        if self.channels == 0 {
            self.channels = if data.dim() % 3 == 0 && is_square(data.dim() / 3) && !is_square(data.dim()) {
                3
            } else {
                1
            };
        }
        let plane = data.dim() / self.channels;
        if self.height == 0 && self.width == 0 {
            let side = (plane as f64).sqrt().round() as usize;
            self.height = side;
            self.width = side;
        }
        if self.channels * self.height * self.width != data.dim() {
            bail!(
                "model geometry {}x{}x{} does not match input width {}",
                self.channels,
                self.height,
                self.width,
                data.dim()
            );
        }
        Ok(())
    }

    pub fn architecture(&self, input: usize, classes: usize) -> Architecture {
        match self.arch {
            ArchKind::Mlp => Architecture::Mlp {
                input,
                hidden: self.hidden.clone(),
                classes,
            },
            ArchKind::SmallConv => Architecture::SmallConv {
                channels: self.channels,
                height: self.height,
                width: self.width,
                conv: self.conv,
                dense: self.dense,
                classes,
            },
        }
    }
}

fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub kinds: Vec<AttackSpec>,
    pub epsilon: f64,
    /// PGD steps for diagnostics and for kinds written without a count.
    pub steps: usize,
    pub step_fraction: f64,
    pub random_start: bool,
    pub restarts: usize,
    /// InfoPGD consistency weight.
    pub lambda: f64,
    /// Evaluate on the first `examples` test points; 0 uses all.
    pub examples: usize,
    pub seed: u64,
    pub bins: usize,
    pub eps_max: f64,
    pub tol: f64,
    pub resolution: usize,
    pub example_index: usize,
    pub directions: usize,
    pub magnitudes: Vec<f64>,
}

impl EvalConfig {
    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.epsilon * self.step_fraction,
            random_start: self.random_start,
            lambda: self.lambda,
            restarts: self.restarts,
            ..AttackConfig::pgd(self.epsilon, self.steps)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub weighting: Vec<Weighting>,
    pub divergence: Vec<Divergence>,
    pub outer_reg: Vec<OuterReg>,
    pub mine_tap: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        self.weighting.len()
            * self.divergence.len()
            * self.outer_reg.len()
            * self.mine_tap.len()
            * self.lambda.len()
            * self.beta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training-attack step size as a fraction of its radius.
    pub attack_step_fraction: f64,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

/// Raw `section.key → value` lookups with key tracking.
struct Raw {
    ini: Ini,
}

impl Raw {
    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.section(Some(section)).and_then(|s| s.get(key)).map(str::trim)
    }

    fn parse<T>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(section, key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("{section}.{key} = `{v}`: {e}")))
            .transpose()
    }

    fn list<T>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(section, key)
            .map(|v| parse_list::<T>(v).map_err(|e| anyhow!("{section}.{key} = `{v}`: {e}")))
            .transpose()
    }

    fn epsilon(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.get(section, key)
            .map(|v| parse_epsilon(v).with_context(|| format!("{section}.{key}")))
            .transpose()
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.get(section, key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn check_keys(&self) -> Result<()> {
        for (section, props) in self.ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    bail!("key `{key}` appears before any [section]");
                }
                continue;
            };
            let Some((_, keys)) = KNOWN.iter().find(|(s, _)| *s == section) else {
                let valid: Vec<&str> = KNOWN.iter().map(|(s, _)| *s).collect();
                bail!("unknown section [{section}] (expected one of {})", valid.join(", "));
            };
            let mut seen = BTreeSet::new();
            for (key, _) in props.iter() {
                if !keys.contains(&key) {
                    bail!("unknown key `{key}` in [{section}] (valid keys: {})", keys.join(", "));
                }
                if !seen.insert(key) {
                    bail!("duplicate key `{key}` in [{section}]");
                }
            }
        }
        Ok(())
    }
}

/// Splits `--section.key value` and `--section.key=value` pairs out of
/// the argument list.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut args = args.into_iter();
    while let Some(arg) = args.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|body| body.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => match body.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = args.next().ok_or_else(|| anyhow!("missing value for --{body}"))?;
                    overrides.push((body.to_string(), v));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

impl Experiment {
    /// Parses config text, then applies `section.key` overrides in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut ini = Ini::load_from_str(text).context("config syntax")?;
        for (key, value) in overrides {
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| anyhow!("override `{key}` must be written section.key"))?;
            ini.with_section(Some(section)).set(key, value.as_str());
        }
        let raw = Raw { ini };
        raw.check_keys()?;
        Self::from_raw(&raw)
    }

    fn from_raw(raw: &Raw) -> Result<Self> {
        let data = DataConfig {
            source: raw.parse("data", "source")?.unwrap_or(DataSource::TwoMoons),
            n: raw.parse("data", "n")?.unwrap_or(1500),
            noise: raw.parse("data", "noise")?.unwrap_or(0.2),
            seed: raw.parse("data", "seed")?.unwrap_or(0),
            test_fraction: raw.parse("data", "test_fraction")?.unwrap_or(1.0 / 3.0),
            images: raw.path("data", "images"),
            labels: raw.path("data", "labels"),
            path: raw.path("data", "path"),
            classes: raw.list("data", "classes")?.unwrap_or_default(),
            limit: raw.parse("data", "limit")?.unwrap_or(0),
        };

        let arch = match raw.get("model", "arch").unwrap_or("mlp") {
            "mlp" => ArchKind::Mlp,
            "smallconv" => ArchKind::SmallConv,
            other => bail!("model.arch = `{other}`: expected mlp or smallconv"),
        };
        let conv: Vec<usize> = raw.list("model", "conv")?.unwrap_or_else(|| vec![8, 16]);
        let conv: [usize; 2] = conv
            .try_into()
            .map_err(|v: Vec<usize>| anyhow!("model.conv needs two widths, got {}", v.len()))?;
        let model = ModelConfig {
            arch,
            hidden: raw.list("model", "hidden")?.unwrap_or_else(|| vec![64, 64]),
            conv,
            dense: raw.parse("model", "dense")?.unwrap_or(64),
            channels: raw.parse("model", "channels")?.unwrap_or(0),
            height: raw.parse("model", "height")?.unwrap_or(0),
            width: raw.parse("model", "width")?.unwrap_or(0),
        };

        let objective: ObjectiveKind = raw.parse("train", "objective")?.unwrap_or(ObjectiveKind::InfoAt);
        let mut train = TrainConfig::new(objective);
        macro_rules! set {
            ($field:expr, $section:literal, $key:literal) => {
                if let Some(v) = raw.parse($section, $key)? {
                    $field = v;
                }
            };
        }
        set!(train.lambda, "train", "lambda");
        set!(train.beta, "train", "beta");
        set!(train.epochs, "train", "epochs");
        set!(train.batch_size, "train", "batch_size");
        set!(train.lr, "train", "lr");
        set!(train.momentum, "train", "momentum");
        set!(train.weight_decay, "train", "weight_decay");
        set!(train.lr_drop_factor, "train", "lr_drop_factor");
        set!(train.seed, "train", "seed");
        set!(train.ablation.weighting, "train", "weighting");
        set!(train.ablation.divergence, "train", "divergence");
        set!(train.ablation.outer_reg, "train", "outer_reg");
        set!(train.ablation.detach_nat_entropy, "train", "detach_nat_entropy");
        set!(train.ablation.mine_tap, "train", "mine_tap");
        set!(train.ablation.mine_steps, "train", "mine_steps");
        if let Some(drops) = raw.list("train", "lr_drops")? {
            train.lr_drops = drops;
        }
        let epsilon = raw.epsilon("attack", "epsilon")?.unwrap_or(train.attack.epsilon);
        let steps = raw.parse("attack", "steps")?.unwrap_or(train.attack.steps);
        let step_fraction: f64 = raw.parse("attack", "step_fraction")?.unwrap_or(0.25);
        train.attack = AttackConfig {
            step_size: epsilon * step_fraction,
            random_start: raw.parse("attack", "random_start")?.unwrap_or(true),
            restarts: raw.parse("attack", "restarts")?.unwrap_or(1),
            ..AttackConfig::pgd(epsilon, steps)
        };
        train.validate().context("invalid [train]/[attack] settings")?;

        let eval_eps = raw.epsilon("eval", "epsilon")?.unwrap_or(epsilon);
        let kinds = match raw.get("eval", "kinds") {
            Some(v) => parse_list::<AttackSpec>(v).map_err(|e| anyhow!("eval.kinds = `{v}`: {e}"))?,
            None => vec!["fgsm".parse()?, "pgd20".parse()?],
        };
        let eval = EvalConfig {
            kinds,
            epsilon: eval_eps,
            steps: raw.parse("eval", "steps")?.unwrap_or(20),
            step_fraction: raw.parse("eval", "step_fraction")?.unwrap_or(0.25),
            random_start: raw.parse("eval", "random_start")?.unwrap_or(false),
            restarts: raw.parse("eval", "restarts")?.unwrap_or(1),
            lambda: raw.parse("eval", "lambda")?.unwrap_or(2.5),
            examples: raw.parse("eval", "examples")?.unwrap_or(0),
            seed: raw.parse("eval", "seed")?.unwrap_or(0),
            bins: raw.parse("eval", "bins")?.unwrap_or(10),
            eps_max: raw.epsilon("eval", "eps_max")?.unwrap_or(4.0 * eval_eps),
            tol: raw.parse("eval", "tol")?.unwrap_or(1e-3),
            resolution: raw.parse("eval", "resolution")?.unwrap_or(21),
            example_index: raw.parse("eval", "example_index")?.unwrap_or(0),
            directions: raw.parse("eval", "directions")?.unwrap_or(5),
            magnitudes: raw
                .list("eval", "magnitudes")?
                .unwrap_or_else(|| (0..=10).map(|i| -0.5 + 0.1 * i as f64).collect()),
        };
        eval.attack().validate().context("invalid [eval] attack settings")?;

        let grid = GridConfig {
            weighting: raw
                .list("grid", "weighting")?
                .unwrap_or_else(|| vec![train.ablation.weighting]),
            divergence: raw
                .list("grid", "divergence")?
                .unwrap_or_else(|| vec![train.ablation.divergence]),
            outer_reg: raw
                .list("grid", "outer_reg")?
                .unwrap_or_else(|| vec![train.ablation.outer_reg]),
            mine_tap: raw
                .list("grid", "mine_tap")?
                .unwrap_or_else(|| vec![train.ablation.mine_tap]),
            lambda: raw.list("grid", "lambda")?.unwrap_or_else(|| vec![train.lambda]),
            beta: raw.list("grid", "beta")?.unwrap_or_else(|| vec![train.beta]),
        };
        if grid.cells() == 0 {
            bail!("every [grid] list needs at least one value");
        }

        Ok(Experiment {
            data,
            model,
            train,
            attack_step_fraction: step_fraction,
            eval,
            grid,
        })
    }

    /// The fully resolved configuration; parsing it gives back `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "source = {}", d.source.name());
        let _ = writeln!(s, "n = {}", d.n);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "test_fraction = {}", d.test_fraction);
        let _ = writeln!(s, "images = {}", opt(&d.images));
        let _ = writeln!(s, "labels = {}", opt(&d.labels));
        let _ = writeln!(s, "path = {}", opt(&d.path));
        let _ = writeln!(s, "classes = {}", join(&d.classes));
        let _ = writeln!(s, "limit = {}", d.limit);

        let m = &self.model;
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(
            s,
            "arch = {}",
            if m.arch == ArchKind::Mlp { "mlp" } else { "smallconv" }
        );
        let _ = writeln!(s, "hidden = {}", join(&m.hidden));
        let _ = writeln!(s, "conv = {}", join(&m.conv));
        let _ = writeln!(s, "dense = {}", m.dense);
        let _ = writeln!(s, "channels = {}", m.channels);
        let _ = writeln!(s, "height = {}", m.height);
        let _ = writeln!(s, "width = {}", m.width);

        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "objective = {}", t.objective);
        let _ = writeln!(s, "lambda = {}", t.lambda);
        let _ = writeln!(s, "beta = {}", t.beta);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "lr_drops = {}", join(&t.lr_drops));
        let _ = writeln!(s, "lr_drop_factor = {}", t.lr_drop_factor);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "weighting = {}", t.ablation.weighting);
        let _ = writeln!(s, "divergence = {}", t.ablation.divergence.name());
        let _ = writeln!(s, "outer_reg = {}", t.ablation.outer_reg);
        let _ = writeln!(s, "detach_nat_entropy = {}", t.ablation.detach_nat_entropy);
        let _ = writeln!(s, "mine_tap = {}", t.ablation.mine_tap);
        let _ = writeln!(s, "mine_steps = {}", t.ablation.mine_steps);

        let a = &t.attack;
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "epsilon = {}", a.epsilon);
        let _ = writeln!(s, "steps = {}", a.steps);
        let _ = writeln!(s, "step_fraction = {}", self.attack_step_fraction);
        let _ = writeln!(s, "random_start = {}", a.random_start);
        let _ = writeln!(s, "restarts = {}", a.restarts);

        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "kinds = {}", join(&e.kinds));
        let _ = writeln!(s, "epsilon = {}", e.epsilon);
        let _ = writeln!(s, "steps = {}", e.steps);
        let _ = writeln!(s, "step_fraction = {}", e.step_fraction);
        let _ = writeln!(s, "random_start = {}", e.random_start);
        let _ = writeln!(s, "restarts = {}", e.restarts);
        let _ = writeln!(s, "lambda = {}", e.lambda);
        let _ = writeln!(s, "examples = {}", e.examples);
        let _ = writeln!(s, "seed = {}", e.seed);
        let _ = writeln!(s, "bins = {}", e.bins);
        let _ = writeln!(s, "eps_max = {}", e.eps_max);
        let _ = writeln!(s, "tol = {}", e.tol);
        let _ = writeln!(s, "resolution = {}", e.resolution);
        let _ = writeln!(s, "example_index = {}", e.example_index);
        let _ = writeln!(s, "directions = {}", e.directions);
        let _ = writeln!(s, "magnitudes = {}", join(&e.magnitudes));

        let g = &self.grid;
        let names = |v: &[Divergence]| v.iter().map(|d| d.name()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(s, "weighting = {}", join(&g.weighting));
        let _ = writeln!(s, "divergence = {}", names(&g.divergence));
        let _ = writeln!(s, "outer_reg = {}", join(&g.outer_reg));
        let _ = writeln!(s, "mine_tap = {}", join(&g.mine_tap));
        let _ = writeln!(s, "lambda = {}", join(&g.lambda));
        let _ = writeln!(s, "beta = {}", join(&g.beta));
        s
    }
}
