//! Reference classifiers: a ReLU MLP and a two-block conv net.
//!
//! Both expose logits, softmax probabilities, predictions, and named latent
//! taps. Taps are ordered from the input to the output; ordinal taps `#1..#4`
//! (see [`Classifier::layer_tap`]) skip the input tap.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeometry, Graph, PoolGeometry, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CONV_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// `input → hidden[0] → … → classes`, ReLU between layers. Empty `hidden`
    /// gives a linear model.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Two `conv3×3 → relu → maxpool2` blocks, a dense ReLU layer, then the
    /// output layer.
    SmallConv {
        channels: usize,
        height: usize,
        width: usize,
        conv: [usize; 2],
        dense: usize,
        classes: usize,
    },
}

impl Architecture {
    /// The default MLP: `input → 256 → 256 → classes`.
    pub fn mlp(input: usize, classes: usize) -> Self {
        Architecture::Mlp {
            input,
            hidden: vec![256, 256],
            classes,
        }
    }

    pub fn small_conv(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Architecture::SmallConv {
            channels,
            height,
            width,
            conv: [8, 16],
            dense: 64,
            classes,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Architecture::Mlp { input, .. } => *input,
            Architecture::SmallConv {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. } | Architecture::SmallConv { classes, .. } => *classes,
        }
    }

    fn conv_geometries(&self) -> Option<(ConvGeometry, PoolGeometry, ConvGeometry, PoolGeometry)> {
        let &Architecture::SmallConv {
            channels,
            height,
            width,
            conv,
            ..
        } = self
        else {
            return None;
        };
        let c1 = ConvGeometry {
            in_channels: channels,
            height,
            width,
            out_channels: conv[0],
            kernel: CONV_KERNEL,
            padding: 1,
        };
        let p1 = PoolGeometry {
            channels: conv[0],
            height: c1.out_height(),
            width: c1.out_width(),
        };
        let c2 = ConvGeometry {
            in_channels: conv[0],
            height: p1.out_height(),
            width: p1.out_width(),
            out_channels: conv[1],
            kernel: CONV_KERNEL,
            padding: 1,
        };
        let p2 = PoolGeometry {
            channels: conv[1],
            height: c2.out_height(),
            width: c2.out_width(),
        };
        Some((c1, p1, c2, p2))
    }

    /// Names and shapes of the parameter tensors, in storage order, with the
    /// fan-in used for initialisation.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = Vec::new();
        let dense = |specs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
            specs.push((format!("{name}.weight"), vec![fan_in, fan_out], fan_in));
            specs.push((format!("{name}.bias"), vec![fan_out], fan_in));
        };
        match self {
            Architecture::Mlp { input, hidden, classes } => {
                let mut width = *input;
                for (i, &h) in hidden.iter().enumerate() {
                    dense(&mut specs, &format!("fc{}", i + 1), width, h);
                    width = h;
                }
                dense(&mut specs, "out", width, *classes);
            }
            Architecture::SmallConv { dense: d, classes, .. } => {
                let (c1, _, c2, p2) = self.conv_geometries().expect("conv geometry");
                for (name, geo) in [("conv1", c1), ("conv2", c2)] {
                    let fan_in = geo.in_channels * geo.kernel * geo.kernel;
                    specs.push((format!("{name}.weight"), vec![geo.out_channels, fan_in], fan_in));
                    specs.push((format!("{name}.bias"), vec![geo.out_channels], fan_in));
                }
                dense(&mut specs, "dense", p2.out_len(), *d);
                dense(&mut specs, "out", *d, *classes);
            }
        }
        specs
    }

    /// Latent tap names, input first.
    pub fn latent_taps(&self) -> Vec<String> {
        let mut taps = vec!["input".to_string()];
        match self {
            Architecture::Mlp { hidden, .. } => {
                taps.extend((1..=hidden.len()).map(|i| format!("hidden{i}")));
            }
            Architecture::SmallConv { .. } => {
                taps.extend(["conv1", "conv2", "dense"].map(String::from));
            }
        }
        taps.push("logits".into());
        taps.push("probs".into());
        taps
    }

    fn validate(&self) -> Result<()> {
        let bad = || Error::BadArchitecture(self.to_string());
        match self {
            // a single-output MLP is allowed; it serves as a scalar critic
            Architecture::Mlp { input, hidden, classes } => {
                if *input == 0 || *classes == 0 || hidden.contains(&0) {
                    return Err(bad());
                }
            }
            Architecture::SmallConv {
                channels,
                height,
                width,
                conv,
                dense,
                classes,
            } => {
                if *channels == 0 || *height < 4 || *width < 4 || conv.contains(&0) || *dense == 0 || *classes < 2 {
                    return Err(bad());
                }
            }
        }
        Ok(())
    }
}

fn join(values: &[usize], sep: &str) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { input, hidden, classes } => {
                write!(f, "mlp in={input} hidden={} classes={classes}", join(hidden, ","))
            }
            Architecture::SmallConv {
                channels,
                height,
                width,
                conv,
                dense,
                classes,
            } => write!(
                f,
                "smallconv in={channels}x{height}x{width} conv={} dense={dense} classes={classes}",
                join(conv, ",")
            ),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadArchitecture(s.to_string());
        let mut words = s.split_whitespace();
        let kind = words.next().ok_or_else(bad)?;
        let mut fields = std::collections::BTreeMap::new();
        for word in words {
            let (k, v) = word.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let list = |key: &str, sep: char| -> Result<Vec<usize>> {
            let v = fields.get(key).ok_or_else(bad)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(sep).map(|p| p.parse().map_err(|_| bad())).collect()
        };
        let one = |key: &str| -> Result<usize> { fields.get(key).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let arch = match kind {
            "mlp" => Architecture::Mlp {
                input: one("in")?,
                hidden: list("hidden", ',')?,
                classes: one("classes")?,
            },
            "smallconv" => {
                let shape = list("in", 'x')?;
                let conv = list("conv", ',')?;
                if shape.len() != 3 || conv.len() != 2 {
                    return Err(bad());
                }
                Architecture::SmallConv {
                    channels: shape[0],
                    height: shape[1],
                    width: shape[2],
                    conv: [conv[0], conv[1]],
                    dense: one("dense")?,
                    classes: one("classes")?,
                }
            }
            _ => return Err(bad()),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A classifier: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    params: Vec<Param>,
}

/// Outputs of one forward pass.
pub struct Forward {
    /// `(name, value)` for every latent tap, input first.
    pub taps: Vec<(String, Var)>,
    pub logits: Var,
    pub probs: Var,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }
}

impl Classifier {
    /// Uniform fan-in initialisation: every entry of a layer drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
                Param {
                    name,
                    value: Tensor::new(shape, data).expect("param shape"),
                }
            })
            .collect();
        Ok(Classifier { arch, params })
    }

    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape, _)| Param {
                name,
                value: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Classifier { arch, params })
    }

    /// Builds a classifier from explicit parameters, checked against the
    /// architecture's names and shapes.
    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "architecture `{arch}` has {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` {:?} does not match `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Classifier { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn latent_taps(&self) -> Vec<String> {
        self.arch.latent_taps()
    }

    /// Name of ordinal tap `#ordinal` (1-based, input excluded).
    pub fn layer_tap(&self, ordinal: usize) -> Result<String> {
        let taps = self.latent_taps();
        if ordinal == 0 || ordinal >= taps.len() {
            return Err(Error::UnknownTap(format!("#{ordinal}")));
        }
        Ok(taps[ordinal].clone())
    }

    /// Puts the parameters on `g`, tracked or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn forward(&self, g: &Graph, params: &[Var], x: Var) -> Result<Forward> {
        let shape = g.shape(x)?;
        let width = shape.get(1).copied().unwrap_or(0);
        if shape.len() != 2 || width != self.arch.input_width() {
            return Err(Error::WidthMismatch {
                expected: self.arch.input_width(),
                found: width,
            });
        }
        let rows = shape[0];
        let mut taps = vec![("input".to_string(), x)];
        let mut h = x;
        match &self.arch {
            Architecture::Mlp { hidden, .. } => {
                for i in 0..hidden.len() {
                    h = g.add_bias(g.matmul(h, params[2 * i])?, params[2 * i + 1])?;
                    h = g.relu(h)?;
                    taps.push((format!("hidden{}", i + 1), h));
                }
                let last = 2 * hidden.len();
                h = g.add_bias(g.matmul(h, params[last])?, params[last + 1])?;
            }
            Architecture::SmallConv { .. } => {
                let (c1, p1, c2, p2) = self.arch.conv_geometries().expect("conv geometry");
                for (i, (cg, pg, name)) in [(c1, p1, "conv1"), (c2, p2, "conv2")].into_iter().enumerate() {
                    let y = g.conv2d(h, params[2 * i], cg)?;
                    let y = g.add_bias(y, channel_bias(g, params[2 * i + 1], &cg)?)?;
                    h = g.max_pool(g.relu(y)?, pg)?;
                    taps.push((name.to_string(), h));
                }
                debug_assert_eq!(g.shape(h)?, vec![rows, p2.out_len()]);
                h = g.relu(g.add_bias(g.matmul(h, params[4])?, params[5])?)?;
                taps.push(("dense".to_string(), h));
                h = g.add_bias(g.matmul(h, params[6])?, params[7])?;
            }
        }
        let logits = h;
        let probs = g.softmax(logits)?;
        taps.push(("logits".into(), logits));
        taps.push(("probs".into(), probs));
        Ok(Forward { taps, logits, probs })
    }

    /// Logits for a batch, without gradient tracking.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&g, &params, xv)?;
        Ok((*g.value(out.logits)?).clone())
    }

    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        softmax_probs(&self.logits(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Value of the named latent tap for a batch.
    pub fn latent(&self, x: &Tensor, tap: &str) -> Result<Tensor> {
        if !self.latent_taps().iter().any(|t| t == tap) {
            return Err(Error::UnknownTap(tap.to_string()));
        }
        let g = Graph::new();
        let params = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&g, &params, xv)?;
        Ok((*g.value(out.tap(tap)?)?).clone())
    }
}

/// Expands a per-channel bias to one value per output position, as a
/// differentiable `bias · E` with a constant 0/1 expansion matrix.
fn channel_bias(g: &Graph, bias: Var, geo: &ConvGeometry) -> Result<Var> {
    let spatial = geo.out_height() * geo.out_width();
    let channels = geo.out_channels;
    let mut expand = vec![0.0; channels * channels * spatial];
    for c in 0..channels {
        for s in 0..spatial {
            expand[c * channels * spatial + c * spatial + s] = 1.0;
        }
    }
    let e = g.constant(Tensor::matrix(channels, channels * spatial, expand)?);
    let row = g.reshape(bias, vec![1, channels])?;
    g.reshape(g.matmul(row, e)?, vec![channels * spatial])
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax_probs input"));
    }
    let g = Graph::new();
    let l = g.constant(logits.clone());
    Ok((*g.value(g.softmax(l)?)?).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let cols = m.shape().last().copied().unwrap_or(1).max(1);
    m.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
