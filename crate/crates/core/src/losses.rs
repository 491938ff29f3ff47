//! Rate–distortion and temporal mask consistency objectives.
//!
//! Every regularizer comes with its closed-form gradient with respect to the
//! mask vector. The rendering term's gradient is supplied by the caller.

use serde::{Deserialize, Serialize};

use crate::asset::{LayerId, MaskBank};
use crate::entropy::weighted_rate;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Clamp applied to masks inside the binary-entropy logarithms.
pub const MASK_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_layer: [f64; 3],
    pub lambda_temporal: f64,
    /// Smoothness length scale in scene units.
    pub tau: f64,
    /// Pairs sampled per anchor each step.
    pub pairs_per_anchor: usize,
    pub binary_enabled: bool,
    pub smooth_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_layer: [0.04, 0.01, 0.00025],
            lambda_temporal: 0.01,
            tau: 0.1,
            pairs_per_anchor: 4,
            binary_enabled: true,
            smooth_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_layer.iter().any(|l| !(*l >= 0.0)) || !(self.lambda_temporal >= 0.0) {
            return Err(Error::Domain("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau {} must be positive", self.tau)));
        }
        if self.pairs_per_anchor == 0 {
            return Err(Error::Domain("pair budget must be at least one per anchor".into()));
        }
        Ok(())
    }

    pub fn pair_count(&self, anchor_count: usize) -> usize {
        (self.pairs_per_anchor * anchor_count).max(1)
    }
}

fn clamp_eps(m: f64) -> f64 {
    m.clamp(MASK_EPS, 1.0 - MASK_EPS)
}

/// Mean Bernoulli entropy (bits) of the mask values.
pub fn binary_entropy_loss(mask: &[f64]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let total: f64 = mask
        .iter()
        .map(|&m| {
            let m = clamp_eps(m);
            -(m * m.log2() + (1.0 - m) * (1.0 - m).log2())
        })
        .sum();
    (total / mask.len() as f64).max(0.0)
}

/// Gradient of [`binary_entropy_loss`]; zero where the clamp is active.
pub fn binary_entropy_grad(mask: &[f64]) -> Vec<f64> {
    let n = mask.len() as f64;
    mask.iter()
        .map(|&m| {
            if m <= MASK_EPS || m >= 1.0 - MASK_EPS {
                0.0
            } else {
                ((1.0 - m) / m).log2() / n
            }
        })
        .collect()
}

fn pair_weight(positions: &[f64], dim: usize, i: usize, j: usize, tau: f64) -> f64 {
    let d2: f64 = (0..dim)
        .map(|k| {
            let d = positions[i * dim + k] - positions[j * dim + k];
            d * d
        })
        .sum();
    (-d2.sqrt() / tau).exp()
}

/// Distance-weighted mean absolute mask difference over sampled pairs.
pub fn smoothness_loss(mask: &[f64], positions: &[f64], dim: usize, pairs: &[(usize, usize)], tau: f64) -> Result<f64> {
    validate_pairs(mask, positions, dim, pairs, tau)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| pair_weight(positions, dim, i, j, tau) * (mask[i] - mask[j]).abs())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Subgradient of [`smoothness_loss`], taking `sign(0) = 0`.
pub fn smoothness_grad(mask: &[f64], positions: &[f64], dim: usize, pairs: &[(usize, usize)], tau: f64) -> Result<Vec<f64>> {
    validate_pairs(mask, positions, dim, pairs, tau)?;
    let mut grad = vec![0.0; mask.len()];
    if pairs.is_empty() {
        return Ok(grad);
    }
    let inv = 1.0 / pairs.len() as f64;
    for &(i, j) in pairs {
        let diff = mask[i] - mask[j];
        if diff == 0.0 {
            continue;
        }
        let g = pair_weight(positions, dim, i, j, tau) * diff.signum() * inv;
        grad[i] += g;
        grad[j] -= g;
    }
    Ok(grad)
}

fn validate_pairs(mask: &[f64], positions: &[f64], dim: usize, pairs: &[(usize, usize)], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau {tau} must be positive")));
    }
    if positions.len() != mask.len() * dim {
        return Err(Error::Dimension(format!(
            "{} position values for {} anchors in {dim}D",
            positions.len(),
            mask.len()
        )));
    }
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= mask.len() || *j >= mask.len()) {
        return Err(Error::Dimension(format!("pair ({i},{j}) out of range")));
    }
    Ok(())
}

/// Uniform ordered pairs `(i, j)` with `i != j`.
pub fn sample_pairs(anchor_count: usize, pair_count: usize, rng_seed: u64) -> Result<Vec<(usize, usize)>> {
    sample_pairs_from(anchor_count, pair_count, CounterRng::new(rng_seed, crate::rng::streams::PAIRS))
}

pub(crate) fn sample_pairs_from(anchor_count: usize, pair_count: usize, rng: CounterRng) -> Result<Vec<(usize, usize)>> {
    if anchor_count < 2 {
        return Err(Error::InsufficientData(format!(
            "pair sampling needs at least 2 anchors, got {anchor_count}"
        )));
    }
    let n = anchor_count as u64;
    Ok((0..pair_count as u64)
        .map(|k| {
            let i = rng.below_at(2 * k, n);
            // draw j from the n-1 other anchors
            let mut j = rng.below_at(2 * k + 1, n - 1);
            if j >= i {
                j += 1;
            }
            (i as usize, j as usize)
        })
        .collect())
}

/// Value and mask gradient of a level's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelLoss {
    pub total: f64,
    pub rate: f64,
    pub tmc: f64,
    /// Gradient of `λ_ℓ·R_ℓ + λ_temporal·L_TMC` only.
    pub grad: Vec<f64>,
}

/// Inputs of a level objective that do not change within a step.
pub struct LevelTerms<'a> {
    /// Per-anchor bit cost `R(f)+R(s)+R(o)` under the step's priors.
    pub anchor_costs: &'a [f64],
    pub positions: &'a [f64],
    pub dim: usize,
    pub pairs: &'a [(usize, usize)],
}

/// `render_loss + λ_ℓ R_ℓ(m) + λ_temporal (L_binary + L_smooth)`.
pub fn level_loss(
    render_loss: f64,
    bank: &MaskBank,
    level: LayerId,
    weights: &LossWeights,
    terms: &LevelTerms<'_>,
) -> Result<LevelLoss> {
    level_loss_for_mask(render_loss, bank.level(level), level, weights, terms)
}

pub fn level_loss_for_mask(
    render_loss: f64,
    mask: &[f64],
    level: LayerId,
    weights: &LossWeights,
    terms: &LevelTerms<'_>,
) -> Result<LevelLoss> {
    let n = mask.len();
    if terms.anchor_costs.len() != n {
        return Err(Error::Dimension(format!(
            "{} anchor costs for {n} masks",
            terms.anchor_costs.len()
        )));
    }
    let lambda = weights.lambda_layer[level.index()];
    let rate = weighted_rate(mask, terms.anchor_costs);
    let mut grad: Vec<f64> = terms.anchor_costs.iter().map(|c| lambda * c / n as f64).collect();

    let mut tmc = 0.0;
    if weights.binary_enabled {
        tmc += binary_entropy_loss(mask);
        for (g, b) in grad.iter_mut().zip(binary_entropy_grad(mask)) {
            *g += weights.lambda_temporal * b;
        }
    }
    if weights.smooth_enabled {
        tmc += smoothness_loss(mask, terms.positions, terms.dim, terms.pairs, weights.tau)?;
        let sg = smoothness_grad(mask, terms.positions, terms.dim, terms.pairs, weights.tau)?;
        for (g, s) in grad.iter_mut().zip(sg) {
            *g += weights.lambda_temporal * s;
        }
    }
    Ok(LevelLoss {
        total: render_loss + lambda * rate + weights.lambda_temporal * tmc,
        rate,
        tmc,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_entropy_examples() {
        assert!((binary_entropy_loss(&[0.5; 7]) - 1.0).abs() < 1e-15);
        assert!(binary_entropy_loss(&[0.0, 1.0, 1.0, 0.0]) <= 3e-6);
        assert!((binary_entropy_loss(&[0.5, 1.0]) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn binary_entropy_peaks_at_half() {
        let grid: Vec<f64> = (0..=1000).map(|k| k as f64 / 1000.0).collect();
        let (arg, _) = grid
            .iter()
            .map(|m| (*m, binary_entropy_loss(&[*m])))
            .fold((0.0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert_eq!(arg, 0.5);
    }

    #[test]
    fn smoothness_examples() {
        let pos = [0.0, 0.0, 0.3, 0.4, 0.1, 0.0];
        assert_eq!(smoothness_loss(&[0.4; 3], &pos, 2, &[(0, 1), (1, 2)], 0.1).unwrap(), 0.0);
        let coincident = [0.2, 0.2, 0.2, 0.2];
        assert_eq!(smoothness_loss(&[1.0, 0.0], &coincident, 2, &[(0, 1)], 0.1).unwrap(), 1.0);
        let at_tau = [0.0, 0.0, 0.06, 0.08];
        let v = smoothness_loss(&[1.0, 0.0], &at_tau, 2, &[(0, 1)], 0.1).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.3679).abs() < 1e-4);
        assert_eq!(smoothness_loss(&[1.0, 0.0], &at_tau, 2, &[], 0.1).unwrap(), 0.0);
        assert!(smoothness_loss(&[1.0, 0.0], &at_tau, 2, &[(0, 2)], 0.1).is_err());
    }

    #[test]
    fn pair_sampling() {
        let pairs = sample_pairs(2, 50, 9).unwrap();
        assert!(pairs.iter().all(|p| *p == (0, 1) || *p == (1, 0)));
        assert!(pairs.contains(&(0, 1)) && pairs.contains(&(1, 0)));
        assert_eq!(sample_pairs(30, 100, 4).unwrap(), sample_pairs(30, 100, 4).unwrap());
        assert_ne!(sample_pairs(30, 100, 4).unwrap(), sample_pairs(30, 100, 5).unwrap());
        assert!(sample_pairs(1, 10, 0).is_err());
    }

    #[test]
    fn pair_first_index_is_uniform() {
        // Pearson chi-square, 99 degrees of freedom; the 0.99 quantile is 134.64.
        let pairs = sample_pairs(100, 10_000, 17).unwrap();
        let mut counts = [0usize; 100];
        for (i, j) in &pairs {
            assert_ne!(i, j);
            counts[*i] += 1;
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 134.64, "chi2 = {chi2}");
    }

    #[test]
    fn level_loss_examples() {
        let costs = [3.0, 5.0];
        let pos = [0.0, 0.0, 0.5, 0.5];
        let pairs = [(0, 1)];
        let terms = LevelTerms { anchor_costs: &costs, positions: &pos, dim: 2, pairs: &pairs };
        let off = LossWeights { lambda_layer: [0.0; 3], lambda_temporal: 0.0, ..Default::default() };
        let bank = MaskBank::new([vec![0.3, 0.9], vec![0.3, 0.9], vec![0.3, 0.9]], 0.01).unwrap();
        let l = level_loss(0.123, &bank, LayerId::GLOBAL, &off, &terms).unwrap();
        assert_eq!(l.total, 0.123);

        // rate 2 bits: both masks on, mean cost (1+3)/2 = 2
        let costs = [1.0, 3.0];
        let terms = LevelTerms { anchor_costs: &costs, positions: &pos, dim: 2, pairs: &pairs };
        let bank = MaskBank::ones(2);
        let l = level_loss(0.0, &bank, LayerId::STATIC, &LossWeights::default(), &terms).unwrap();
        assert_eq!(l.rate, 2.0);
        assert!((l.total - 0.08).abs() < 1e-6, "{}", l.total);
    }
}
