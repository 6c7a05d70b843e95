//! Mutual information neural estimation (MINE) with the Donsker–Varadhan
//! bound `E_joint[T] − log E_marginal[e^T]`.
//!
//! The critic sees mean-pooled, standardised embeddings of both sides (at
//! most [`MAX_EMBED`] features each) and is a two-hidden-layer ReLU MLP of
//! width [`CRITIC_WIDTH`]. Marginal samples come from shuffling `zs` within
//! the batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const CRITIC_WIDTH: usize = 64;
pub const MAX_EMBED: usize = 8;
pub const MIN_BATCH: usize = 16;
/// Estimates above `ln(batch) + UNSTABLE_MARGIN` are rejected.
pub const UNSTABLE_MARGIN: f64 = 0.5;
/// Shuffles averaged when reporting the final bound.
pub const EVAL_SHUFFLES: usize = 16;
pub const DEFAULT_LR: f64 = 2e-3;

/// Averages contiguous column groups: `width` columns become
/// `min(width, MAX_EMBED)` features.
pub fn mean_pool(m: &Tensor) -> Result<Tensor> {
    let (rows, width) = m.dims2()?;
    let k = width.min(MAX_EMBED);
    if k == width {
        return Ok(m.clone());
    }
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let row = m.row(r);
        for j in 0..k {
            let (lo, hi) = (j * width / k, (j + 1) * width / k);
            out.push(row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
    }
    Tensor::matrix(rows, k, out)
}

/// Per-column z-scores; constant columns become zero.
fn standardize(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    let mut out = m.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|r| m.data()[r * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (m.data()[r * cols + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        for r in 0..rows {
            let v = &mut out.data_mut()[r * cols + j];
            *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

/// Rows `[x_i | z_{perm(i)}]`.
fn pair_rows(xe: &Tensor, ze: &Tensor, perm: Option<&[usize]>) -> Result<Tensor> {
    let (n, dx) = xe.dims2()?;
    let (_, dz) = ze.dims2()?;
    let mut out = Vec::with_capacity(n * (dx + dz));
    for i in 0..n {
        out.extend_from_slice(xe.row(i));
        out.extend_from_slice(ze.row(perm.map_or(i, |p| p[i])));
    }
    Tensor::matrix(n, dx + dz, out)
}

/// The MINE critic `T(x, z)` with its optimiser state.
#[derive(Clone, Debug)]
pub struct StatisticsNet {
    critic: Classifier,
    adam: Adam,
    x_width: usize,
    z_width: usize,
}

impl StatisticsNet {
    /// Critic for raw inputs of widths `x_width` and `z_width`.
    pub fn new(x_width: usize, z_width: usize, seed: u64) -> Result<Self> {
        Self::with_lr(x_width, z_width, seed, DEFAULT_LR)
    }

    pub fn with_lr(x_width: usize, z_width: usize, seed: u64, lr: f64) -> Result<Self> {
        if x_width == 0 || z_width == 0 {
            return Err(Error::invalid("MINE input widths must be positive"));
        }
        let arch = Architecture::Mlp {
            input: x_width.min(MAX_EMBED) + z_width.min(MAX_EMBED),
            hidden: vec![CRITIC_WIDTH, CRITIC_WIDTH],
            classes: 1,
        };
        Ok(StatisticsNet {
            critic: Classifier::new(arch, seed)?,
            adam: Adam::new(lr),
            x_width,
            z_width,
        })
    }

    pub fn critic(&self) -> &Classifier {
        &self.critic
    }

    fn embed(&self, xs: &Tensor, zs: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, dx) = xs.dims2()?;
        let (nz, dz) = zs.dims2()?;
        if n != nz {
            return Err(Error::invalid(format!("{n} x samples paired with {nz} z samples")));
        }
        if n < MIN_BATCH {
            return Err(Error::invalid(format!(
                "MINE needs at least {MIN_BATCH} pairs, got {n}"
            )));
        }
        if dx != self.x_width || dz != self.z_width {
            return Err(Error::WidthMismatch {
                expected: self.x_width + self.z_width,
                found: dx + dz,
            });
        }
        Ok((standardize(&mean_pool(xs)?)?, standardize(&mean_pool(zs)?)?))
    }

    /// Critic output for each joint pair.
    pub fn scores(&self, xs: &Tensor, zs: &Tensor) -> Result<Vec<f64>> {
        let (xe, ze) = self.embed(xs, zs)?;
        Ok(self.critic.logits(&pair_rows(&xe, &ze, None)?)?.into_data())
    }

    /// One ascent step on the bound for a fresh shuffle; returns the bound
    /// before the step.
    fn ascent_step(&mut self, xe: &Tensor, ze: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
        let n = xe.dims2()?.0;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let g = Graph::new();
        let params = self.critic.bind(&g, true);
        let joint = g.constant(pair_rows(xe, ze, None)?);
        let marginal = g.constant(pair_rows(xe, ze, Some(&perm))?);
        let tj = self.critic.forward(&g, &params, joint)?.logits;
        let tm = self.critic.forward(&g, &params, marginal)?.logits;
        let bound = g.sub(g.mean(tj)?, g.log_mean_exp(tm)?)?;
        let value = g.item(bound)?;
        let grads = g.backward(g.neg(bound)?)?;
        let grads = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>>>()?;
        self.adam.step(self.critic.params_mut(), &grads)?;
        Ok(value)
    }

    /// Runs `steps` ascent steps; returns the bound seen at each.
    pub fn train(&mut self, xs: &Tensor, zs: &Tensor, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (xe, ze) = self.embed(xs, zs)?;
        (0..steps).map(|_| self.ascent_step(&xe, &ze, rng)).collect()
    }

    /// DV bound averaged over [`EVAL_SHUFFLES`] marginal shuffles.
    pub fn bound(&self, xs: &Tensor, zs: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (xe, ze) = self.embed(xs, zs)?;
        let n = xe.dims2()?.0;
        let tj = self.critic.logits(&pair_rows(&xe, &ze, None)?)?;
        let joint = tj.data().iter().sum::<f64>() / n as f64;
        let mut total = 0.0;
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..EVAL_SHUFFLES {
            perm.shuffle(rng);
            let tm = self.critic.logits(&pair_rows(&xe, &ze, Some(&perm))?)?;
            let max = tm.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lme = max + (tm.data().iter().map(|t| (t - max).exp()).sum::<f64>() / n as f64).ln();
            total += joint - lme;
        }
        let value = total / EVAL_SHUFFLES as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("MINE bound"));
        }
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MineEstimate {
    pub value: f64,
    /// Bound at every training step.
    pub trajectory: Vec<f64>,
}

/// Trains `net` for `train_steps` full-batch steps on the paired samples
/// and returns the final bound.
pub fn mine_estimate(
    net: &mut StatisticsNet,
    xs: &Tensor,
    zs: &Tensor,
    train_steps: usize,
    seed: u64,
) -> Result<MineEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectory = net.train(xs, zs, train_steps, &mut rng)?;
    let value = net.bound(xs, zs, &mut rng)?;
    let n = xs.dims2()?.0;
    let bound = (n as f64).ln() + UNSTABLE_MARGIN;
    if value > bound {
        return Err(Error::MineUnstable { value, bound });
    }
    Ok(MineEstimate { value, trajectory })
}

/// MI between a batch of inputs and the classifier's representation at
/// layer `#tap` (1-based), shared by every example of the batch.
pub fn batch_mi_weight(
    c: &Classifier,
    net: &mut StatisticsNet,
    xs: &Tensor,
    tap: usize,
    train_steps: usize,
    seed: u64,
) -> Result<f64> {
    let name = c.layer_tap(tap)?;
    let zs = c.latent(xs, &name)?;
    Ok(mine_estimate(net, xs, &zs, train_steps, seed)?.value)
}

/// Raw widths `(x, z)` a critic needs for layer `#tap` of `c`.
pub fn tap_widths(c: &Classifier, tap: usize) -> Result<(usize, usize)> {
    let name = c.layer_tap(tap)?;
    let probe = Tensor::zeros(&[1, c.architecture().input_width()]);
    let width = c.latent(&probe, &name)?.dims2()?.1;
    Ok((c.architecture().input_width(), width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            xs.push(a);
            zs.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        }
        (Tensor::matrix(n, 1, xs).unwrap(), Tensor::matrix(n, 1, zs).unwrap())
    }

    #[test]
    fn pooling_averages_chunks() {
        let m = Tensor::matrix(1, 16, (0..16).map(f64::from).collect()).unwrap();
        let p = mean_pool(&m).unwrap();
        assert_eq!(p.data(), &[0.5, 2.5, 4.5, 6.5, 8.5, 10.5, 12.5, 14.5]);
        let small = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(mean_pool(&small).unwrap(), small);
    }

    #[test]
    fn rejects_small_or_mismatched_batches() {
        let mut net = StatisticsNet::new(1, 1, 0).unwrap();
        let (x, z) = gaussian_pairs(8, 0.5, 0);
        assert!(mine_estimate(&mut net, &x, &z, 1, 0).is_err());
        let (x, _) = gaussian_pairs(32, 0.5, 0);
        let (_, z) = gaussian_pairs(16, 0.5, 0);
        assert!(mine_estimate(&mut net, &x, &z, 1, 0).is_err());
    }

    #[test]
    fn critic_scores_are_finite() {
        let net = StatisticsNet::new(1, 1, 3).unwrap();
        let (x, z) = gaussian_pairs(64, 0.8, 1);
        assert!(net.scores(&x, &z).unwrap().iter().all(|t| t.is_finite()));
    }

    #[test]
    fn copy_yields_a_large_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(256, 1, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut net = StatisticsNet::new(1, 1, 4).unwrap();
        let est = mine_estimate(&mut net, &x, &x, 400, 4).unwrap();
        assert!(est.value >= 1.0, "{}", est.value);
    }

    #[test]
    fn bound_trends_upward_while_training() {
        let (x, z) = gaussian_pairs(512, 0.8, 6);
        let mut net = StatisticsNet::new(1, 1, 6).unwrap();
        let est = mine_estimate(&mut net, &x, &z, 200, 6).unwrap();
        let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let t = &est.trajectory;
        assert!(avg(&t[190..]) > avg(&t[..10]));
    }
}
