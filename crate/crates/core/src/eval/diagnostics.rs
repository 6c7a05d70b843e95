//! Entropy/robustness profiles and loss-surface scans.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::stats::{gap_p_value, mean_gap, spearman, spearman_negative_p_value};
use super::{attack_success, chunks, clean_entropies, mean_cross_entropy, write_rows, AttackKind, AttackSpec};
use crate::attacks::{self, min_perturbation_batch, AttackConfig, MinPerturbation};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, Param};
use crate::tensor::Tensor;

/// Permutations used by the significance tests.
pub const PERMUTATIONS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub robust: usize,
    pub non_robust: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyProfile {
    pub entropies: Vec<f64>,
    /// PGD success per example.
    pub non_robust: Vec<bool>,
    /// Equal-width bins over `[0, ln K]`.
    pub bins: Vec<EntropyBin>,
    /// Mean entropy of non-robust minus robust examples.
    pub gap: Option<f64>,
    /// One-sided permutation p-value for `gap > 0`.
    pub p_value: Option<f64>,
}

pub const ENTROPY_PROFILE_HEADER: &str = "bin_lo,bin_hi,robust,non_robust,gap,p_value";

impl EntropyProfile {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<_> = self
            .bins
            .iter()
            .map(|bin| {
                (
                    bin.bin_lo,
                    bin.bin_hi,
                    bin.robust,
                    bin.non_robust,
                    self.gap,
                    self.p_value,
                )
            })
            .collect();
        write_rows(path, ENTROPY_PROFILE_HEADER, &rows)
    }
}

/// Clean-input entropy against PGD success (at `cfg`'s radius and steps).
pub fn entropy_robustness_profile(
    c: &Classifier,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    bins: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<EntropyProfile> {
    if bins == 0 {
        return Err(Error::invalid("need at least one histogram bin"));
    }
    let entropies = clean_entropies(c, data)?;
    let non_robust = attack_success(c, data, cfg, AttackSpec::new(AttackKind::Pgd, None), rng)?;
    let top = (c.num_classes() as f64).ln();
    let width = top / bins as f64;
    let mut hist: Vec<EntropyBin> = (0..bins)
        .map(|b| EntropyBin {
            bin_lo: b as f64 * width,
            bin_hi: if b + 1 == bins { top } else { (b + 1) as f64 * width },
            robust: 0,
            non_robust: 0,
        })
        .collect();
    for (&h, &bad) in entropies.iter().zip(&non_robust) {
        let b = if width > 0.0 {
            ((h / width) as usize).min(bins - 1)
        } else {
            0
        };
        if bad {
            hist[b].non_robust += 1;
        } else {
            hist[b].robust += 1;
        }
    }
    let gap = mean_gap(&entropies, &non_robust);
    let p_value = gap_p_value(&entropies, &non_robust, PERMUTATIONS, rng);
    Ok(EntropyProfile {
        entropies,
        non_robust,
        bins: hist,
        gap,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinPertProfile {
    pub labels: Vec<usize>,
    pub entropies: Vec<f64>,
    pub radii: Vec<MinPerturbation>,
    /// Spearman correlation of entropy and radius, sentinels excluded.
    pub spearman: Option<f64>,
    /// One-sided permutation p-value for a negative correlation.
    pub p_value: Option<f64>,
    /// Examples robust up to `eps_max` (left out of the correlation).
    pub sentinels: usize,
}

pub const MINPERT_PROFILE_HEADER: &str = "index,label,entropy,min_epsilon,robust_at_max,spearman,p_value";

impl MinPertProfile {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<_> = self
            .radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let radius = match r {
                    MinPerturbation::Radius(v) => Some(*v),
                    MinPerturbation::RobustAtMax => None,
                };
                (
                    i,
                    self.labels[i],
                    self.entropies[i],
                    radius,
                    radius.is_none(),
                    self.spearman,
                    self.p_value,
                )
            })
            .collect();
        write_rows(path, MINPERT_PROFILE_HEADER, &rows)
    }
}

/// Clean-input entropy against the minimum PGD radius that flips each
/// example (binary search to `tol`, up to `eps_max`).
pub fn min_perturbation_profile(
    c: &Classifier,
    data: &LabeledDataset,
    eps_max: f64,
    tol: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<MinPertProfile> {
    let entropies = clean_entropies(c, data)?;
    let mut radii = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        let (x, y) = data.gather(&idx);
        radii.extend(min_perturbation_batch(c, &x, &y, eps_max, tol, rng)?);
    }
    let (mut h, mut r) = (Vec::new(), Vec::new());
    for (e, m) in entropies.iter().zip(&radii) {
        if let MinPerturbation::Radius(v) = m {
            h.push(*e);
            r.push(*v);
        }
    }
    let sentinels = radii.len() - h.len();
    Ok(MinPertProfile {
        labels: data.labels().to_vec(),
        spearman: spearman(&h, &r),
        p_value: spearman_negative_p_value(&h, &r, PERMUTATIONS, rng),
        entropies,
        radii,
        sentinels,
    })
}

/// CE on `x + δ₁·v + δ₂·r` (clipped to the box) over a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSurface {
    /// Axis coordinates, shared by both axes.
    pub deltas: Vec<f64>,
    /// `losses[i][j]` at `(deltas[i], deltas[j])`.
    pub losses: Vec<Vec<f64>>,
}

pub const INPUT_SURFACE_HEADER: &str = "delta1,delta2,loss";

impl InputSurface {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = Vec::new();
        for (i, row) in self.losses.iter().enumerate() {
            for (j, &loss) in row.iter().enumerate() {
                rows.push((self.deltas[i], self.deltas[j], loss));
            }
        }
        write_rows(path, INPUT_SURFACE_HEADER, &rows)
    }
}

/// `resolution` points from `−radius` to `radius`; the middle point of an
/// odd grid is exactly zero.
pub fn grid_axis(radius: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.0];
    }
    (0..resolution)
        .map(|i| radius * ((2 * i) as f64 / (resolution - 1) as f64 - 1.0))
        .collect()
}

/// Loss surface around one example: `v` is the PGD-10 perturbation scaled
/// to unit L∞ norm, `r` a Rademacher direction; both axes span `[−ε, ε]`.
pub fn input_loss_surface(
    c: &Classifier,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    resolution: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<InputSurface> {
    if resolution == 0 {
        return Err(Error::invalid("grid resolution must be at least 1"));
    }
    let d = x.len();
    let xt = Tensor::matrix(1, d, x.to_vec())?;
    let pgd = AttackConfig {
        steps: 10,
        step_size: cfg.epsilon / 4.0,
        random_start: true,
        restarts: 1,
        ..cfg.clone()
    };
    let adv = attacks::pgd(c, &xt, &[y], &pgd, rng)?;
    let mut v: Vec<f64> = adv.x_adv.data().iter().zip(x).map(|(a, b)| a - b).collect();
    let norm = v.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if norm > 0.0 {
        v.iter_mut().for_each(|t| *t /= norm);
    }
    let r: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let deltas = grid_axis(cfg.epsilon, resolution);
    let mut losses = Vec::with_capacity(resolution);
    for &d1 in &deltas {
        let mut points = Vec::with_capacity(resolution * d);
        for &d2 in &deltas {
            points.extend((0..d).map(|k| (x[k] + d1 * v[k] + d2 * r[k]).clamp(0.0, 1.0)));
        }
        let batch = Tensor::matrix(resolution, d, points)?;
        let g = crate::autodiff::Graph::new();
        let params = c.bind(&g, false);
        let out = c.forward(&g, &params, g.constant(batch))?;
        let ce = crate::losses::cross_entropy_per_example(&g, out.probs, &vec![y; resolution])?;
        losses.push(g.value(ce)?.data().to_vec());
    }
    Ok(InputSurface { deltas, losses })
}

/// Adversarial loss along random filter-normalised weight directions.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSurface {
    pub magnitudes: Vec<f64>,
    /// One curve per direction.
    pub curves: Vec<Vec<f64>>,
    /// Mean over directions.
    pub mean: Vec<f64>,
}

pub const WEIGHT_SURFACE_HEADER: &str = "direction,magnitude,loss";

impl WeightSurface {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = Vec::new();
        for (k, curve) in self.curves.iter().enumerate() {
            for (m, l) in self.magnitudes.iter().zip(curve) {
                rows.push((k.to_string(), *m, *l));
            }
        }
        for (m, l) in self.magnitudes.iter().zip(&self.mean) {
            rows.push(("mean".to_string(), *m, *l));
        }
        write_rows(path, WEIGHT_SURFACE_HEADER, &rows)
    }

    /// `max − min` of the mean curve over `|δ| ≤ within`.
    pub fn flatness(&self, within: f64) -> f64 {
        let vals: Vec<f64> = self
            .magnitudes
            .iter()
            .zip(&self.mean)
            .filter(|(m, _)| m.abs() <= within)
            .map(|(_, l)| *l)
            .collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if vals.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

/// Gaussian direction with each filter rescaled to the norm of the
/// matching filter of `params`; biases get zero. Convolution weights
/// (`[out, in·k·k]`) have one filter per row, dense weights (`[in, out]`)
/// one per column.
pub fn filter_normalized_direction(params: &[Param], rng: &mut (impl Rng + ?Sized)) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            if p.value.rank() != 2 {
                return Tensor::zeros(p.value.shape());
            }
            let (rows, cols) = (p.value.shape()[0], p.value.shape()[1]);
            let mut d: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
            let by_row = p.name.starts_with("conv");
            let (filters, len) = if by_row { (rows, cols) } else { (cols, rows) };
            let at = |f: usize, i: usize| if by_row { f * cols + i } else { i * cols + f };
            for f in 0..filters {
                let theta: f64 = (0..len).map(|i| p.value.data()[at(f, i)].powi(2)).sum::<f64>().sqrt();
                let dn: f64 = (0..len).map(|i| d[at(f, i)].powi(2)).sum::<f64>().sqrt();
                let scale = if dn > 0.0 { theta / dn } else { 0.0 };
                for i in 0..len {
                    d[at(f, i)] *= scale;
                }
            }
            Tensor::new(p.value.shape().to_vec(), d).expect("same shape")
        })
        .collect()
}

/// Mean CE on PGD-10 examples regenerated at `θ + δ·d`, for every
/// magnitude `δ`, averaged over `directions` random directions.
pub fn weight_loss_surface(
    c: &Classifier,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    magnitudes: &[f64],
    directions: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<WeightSurface> {
    if directions == 0 {
        return Err(Error::invalid("need at least one direction"));
    }
    let pgd = AttackConfig {
        steps: 10,
        step_size: cfg.epsilon / 4.0,
        random_start: true,
        restarts: 1,
        ..cfg.clone()
    };
    let mut curves = Vec::with_capacity(directions);
    for _ in 0..directions {
        let dir = filter_normalized_direction(c.params(), rng);
        let mut curve = Vec::with_capacity(magnitudes.len());
        for &delta in magnitudes {
            let mut moved = c.clone();
            for (p, d) in moved.params_mut().iter_mut().zip(&dir) {
                for (t, s) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *t += delta * s;
                }
            }
            let adv = attacks::pgd(&moved, x, y, &pgd, rng)?;
            curve.push(mean_cross_entropy(&moved, &adv.x_adv, y)?);
        }
        curves.push(curve);
    }
    let mean = (0..magnitudes.len())
        .map(|m| curves.iter().map(|c| c[m]).sum::<f64>() / directions as f64)
        .collect();
    Ok(WeightSurface {
        magnitudes: magnitudes.to_vec(),
        curves,
        mean,
    })
}
