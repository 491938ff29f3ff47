//! Gaussian entropy model for anchor attributes.
//!
//! Each attribute family (features, log-scales, offsets) gets one
//! `N(mean, std²)` prior fitted on the active anchors. The cost of a value is
//! the negative log2 of the prior mass inside its quantization bin.

use serde::{Deserialize, Serialize};

use crate::asset::{AnchorSet, LayerId, MaskBank};
use crate::error::{Error, Result};

/// Default quantization step for entropy-coded attributes.
pub const DEFAULT_QUANT_STEP: f64 = 1.0 / 16.0;

/// Lower clip on the bin probability mass.
pub const MASS_FLOOR: f64 = 1e-6;

/// Lower clip on a fitted prior's standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributePrior {
    pub mean: f64,
    pub std: f64,
    pub quant_step: f64,
}

impl AttributePrior {
    pub fn new(mean: f64, std: f64, quant_step: f64) -> Result<Self> {
        if !(std > 0.0) || !(quant_step > 0.0) || !mean.is_finite() {
            return Err(Error::Domain(format!(
                "invalid prior (mean {mean}, std {std}, step {quant_step})"
            )));
        }
        Ok(Self { mean, std, quant_step })
    }
}

/// One prior per attribute family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributePriors {
    pub feature: AttributePrior,
    pub scale: AttributePrior,
    pub offset: AttributePrior,
}

/// Quantization steps per entropy-coded attribute family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSteps {
    pub feature: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Default for QuantSteps {
    fn default() -> Self {
        Self {
            feature: DEFAULT_QUANT_STEP,
            scale: DEFAULT_QUANT_STEP,
            offset: DEFAULT_QUANT_STEP,
        }
    }
}

/// Scales are modeled and stored in the log domain.
#[inline]
pub fn scale_attribute(scale: f64) -> f64 {
    scale.ln()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(hi) − Φ(lo)` evaluated on whichever tail keeps the subtraction
/// well-conditioned.
pub fn std_normal_mass(lo: f64, hi: f64) -> f64 {
    let upper = |x: f64| 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
    let mass = if lo >= 0.0 {
        upper(lo) - upper(hi)
    } else if hi <= 0.0 {
        upper(-hi) - upper(-lo)
    } else {
        1.0 - upper(hi) - upper(-lo)
    };
    mass.max(0.0)
}

/// Probability mass of the prior inside the bin `[a − Q/2, a + Q/2]`.
pub fn bin_mass(a: f64, prior: &AttributePrior) -> f64 {
    let half = 0.5 * prior.quant_step;
    std_normal_mass((a - half - prior.mean) / prior.std, (a + half - prior.mean) / prior.std)
}

/// Shannon bit cost of `a` under `prior`, with the bin mass clipped below at
/// [`MASS_FLOOR`].
pub fn bit_cost(a: f64, prior: &AttributePrior) -> f64 {
    bit_cost_with_floor(a, prior, MASS_FLOOR)
}

pub fn bit_cost_with_floor(a: f64, prior: &AttributePrior, floor: f64) -> f64 {
    let mass = bin_mass(a, prior).max(floor);
    (-mass.log2()).max(0.0)
}

/// Fits a prior on the active entries (population standard deviation).
pub fn estimate_prior(values: &[f64], active: &[bool], quant_step: f64) -> Result<AttributePrior> {
    if values.len() != active.len() {
        return Err(Error::Dimension(format!(
            "{} values with {} activity flags",
            values.len(),
            active.len()
        )));
    }
    let selected = values.iter().zip(active).filter(|(_, a)| **a).map(|(v, _)| *v);
    fit_prior(selected, quant_step)
}

pub(crate) fn fit_prior(values: impl Iterator<Item = f64> + Clone, quant_step: f64) -> Result<AttributePrior> {
    let count = values.clone().count();
    if count < 2 {
        return Err(Error::InsufficientData(format!(
            "prior estimation needs at least 2 active values, got {count}"
        )));
    }
    let n = count as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    AttributePrior::new(mean, var.sqrt().max(STD_FLOOR), quant_step)
}

/// Fits the three attribute-family priors over the anchors in `active`.
pub fn estimate_priors(anchors: &AnchorSet, active: &[usize], steps: &QuantSteps) -> Result<AttributePriors> {
    let feature = fit_prior(active.iter().flat_map(|&i| anchors.feature(i).iter().copied()), steps.feature)?;
    let scale = fit_prior(active.iter().map(|&i| scale_attribute(anchors.scales()[i])), steps.scale)?;
    let offset = fit_prior(active.iter().flat_map(|&i| anchors.offset(i).iter().copied()), steps.offset)?;
    Ok(AttributePriors { feature, scale, offset })
}

/// Per-anchor `R(f) + R(s) + R(o)`, vector attributes summed over components.
pub fn anchor_bit_costs(anchors: &AnchorSet, priors: &AttributePriors) -> Vec<f64> {
    (0..anchors.len())
        .map(|i| {
            let f: f64 = anchors.feature(i).iter().map(|v| bit_cost(*v, &priors.feature)).sum();
            let s = bit_cost(scale_attribute(anchors.scales()[i]), &priors.scale);
            let o: f64 = anchors.offset(i).iter().map(|v| bit_cost(*v, &priors.offset)).sum();
            f + s + o
        })
        .collect()
}

/// Mask-weighted mean of precomputed per-anchor costs.
pub fn weighted_rate(mask: &[f64], costs: &[f64]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().zip(costs).map(|(m, c)| m * c).sum::<f64>() / mask.len() as f64
}

/// Mask-weighted mean per-anchor bit cost for one level.
pub fn layer_rate(bank: &MaskBank, level: LayerId, anchors: &AnchorSet, priors: &AttributePriors) -> Result<f64> {
    if bank.len() != anchors.len() {
        return Err(Error::Dimension(format!(
            "mask bank covers {} anchors, set has {}",
            bank.len(),
            anchors.len()
        )));
    }
    let costs = anchor_bit_costs(anchors, priors);
    Ok(weighted_rate(bank.level(level), &costs))
}

/// Rounds to the nearest bin (ties away from zero) and reconstructs.
pub fn quantize(a: f64, quant_step: f64) -> Result<(i32, f64)> {
    if !(quant_step > 0.0) {
        return Err(Error::Domain(format!("quantization step {quant_step} must be positive")));
    }
    let q = (a / quant_step).round();
    if !(q >= i32::MIN as f64 && q <= i32::MAX as f64) {
        return Err(Error::Overflow { value: a, step: quant_step });
    }
    let index = q as i32;
    Ok((index, index as f64 * quant_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(mean: f64, q: f64) -> AttributePrior {
        AttributePrior::new(mean, 1.0, q).unwrap()
    }

    #[test]
    fn prior_examples() {
        let p = estimate_prior(&[1.0; 4], &[true; 4], 0.1).unwrap();
        assert_eq!(p.mean, 1.0);
        assert_eq!(p.std, STD_FLOOR);

        let p = estimate_prior(&[0.0, 2.0, 100.0], &[true, true, false], 0.1).unwrap();
        assert_eq!((p.mean, p.std), (1.0, 1.0));

        let p = estimate_prior(&[-1.0, 1.0], &[true, true], 0.1).unwrap();
        assert_eq!((p.mean, p.std), (0.0, 1.0));

        assert!(matches!(
            estimate_prior(&[1.0, 2.0], &[true, false], 0.1),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(estimate_prior(&[1.0], &[true, true], 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn bit_cost_at_mean_unit_bin() {
        // Φ(0.5) − Φ(−0.5) = erf(0.5/√2) = 0.382924922548026...
        let expected = -(0.382_924_922_548_026_f64).log2();
        assert!((bit_cost(0.0, &unit(0.0, 1.0)) - expected).abs() < 1e-12);
        assert!((expected - 1.3849).abs() < 1e-4);
    }

    #[test]
    fn bit_cost_full_mass_and_clip() {
        assert!(bit_cost(0.0, &unit(0.0, 40.0)) < 1e-12);
        let clip = bit_cost(10.0, &unit(0.0, 0.01));
        assert_eq!(clip, -(1e-6_f64).log2());
        assert!((clip - 19.9316).abs() < 1e-4);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, 0.0625).unwrap(), (0, 0.0));
        assert_eq!(quantize(0.13, 0.0625).unwrap(), (2, 0.125));
        assert_eq!(quantize(-0.03125, 0.0625).unwrap(), (-1, -0.0625));
        assert_eq!(quantize(0.03125, 0.0625).unwrap(), (1, 0.0625));
        assert!(matches!(quantize(1e12, 1e-3), Err(Error::Overflow { .. })));
        assert!(quantize(1.0, 0.0).is_err());
    }

    #[test]
    fn layer_rate_examples() {
        let anchors = AnchorSet::new(
            2,
            1,
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.3, -0.2],
            vec![0.05, 0.08],
            vec![0.1, 0.2, -0.3, 0.4],
            vec![0.5, 0.5],
            vec![[0.5; 3]; 2],
        )
        .unwrap();
        let priors = estimate_priors(&anchors, &[0, 1], &QuantSteps::default()).unwrap();
        let costs = anchor_bit_costs(&anchors, &priors);

        let off = MaskBank::new([vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]], 0.01).unwrap();
        assert_eq!(layer_rate(&off, LayerId::STATIC, &anchors, &priors).unwrap(), 0.0);

        let half = MaskBank::new([vec![1.0, 0.0], vec![1.0; 2], vec![0.0; 2]], 0.01).unwrap();
        let r = layer_rate(&half, LayerId::STATIC, &anchors, &priors).unwrap();
        assert!((r - costs[0] / 2.0).abs() < 1e-12);

        let one = anchors.select(&[0]);
        let bank = MaskBank::ones(1);
        let r1 = layer_rate(&bank, LayerId::LOCAL, &one, &priors).unwrap();
        let manual = bit_cost(0.3, &priors.feature)
            + bit_cost(0.05_f64.ln(), &priors.scale)
            + bit_cost(0.1, &priors.offset)
            + bit_cost(0.2, &priors.offset);
        assert!((r1 - manual).abs() < 1e-12);
    }

    #[test]
    fn mass_is_stable_in_both_tails() {
        let p = unit(0.0, 0.01);
        let right = bin_mass(7.0, &p);
        let left = bin_mass(-7.0, &p);
        assert!(right > 0.0);
        assert_eq!(right, left);
    }

    proptest! {
        #[test]
        fn bit_cost_symmetric(d in 0.0f64..8.0, mean in -3.0f64..3.0, std in 0.05f64..4.0, q in 0.01f64..2.0) {
            let p = AttributePrior::new(mean, std, q).unwrap();
            prop_assert!((bit_cost(mean + d, &p) - bit_cost(mean - d, &p)).abs() < 1e-9);
        }

        #[test]
        fn bit_cost_monotone_tail(d in 0.0f64..8.0, step in 0.0f64..1.0, std in 0.05f64..4.0, q in 0.01f64..2.0) {
            let p = AttributePrior::new(0.0, std, q).unwrap();
            prop_assert!(bit_cost(d + step, &p) + 1e-9 >= bit_cost(d, &p));
            prop_assert!(bit_cost(d, &p) >= 0.0);
        }

        #[test]
        fn quantize_error_bounded(a in -1.0e4f64..1.0e4, q in 1e-3f64..10.0) {
            let (_, r) = quantize(a, q).unwrap();
            prop_assert!((a - r).abs() <= q / 2.0 + 1e-12 * a.abs().max(1.0));
        }
    }
}
