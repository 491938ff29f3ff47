//! Capacity-weighted level sampling driven by the mask activation rate.

use serde::{Deserialize, Serialize};

use crate::asset::LayerId;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub type Distribution = [f64; 3];

pub const PI_UNIFORM: Distribution = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const PI_AGGRESSIVE: Distribution = [0.15, 0.30, 0.55];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub pi_uniform: Distribution,
    pub pi_aggressive: Distribution,
    pub ema_alpha: f64,
    /// Steps between activation-rate samples.
    pub sample_period: usize,
    /// Steps during which the uniform distribution is used.
    pub warmup: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            pi_uniform: PI_UNIFORM,
            pi_aggressive: PI_AGGRESSIVE,
            ema_alpha: 0.05,
            sample_period: 200,
            warmup: 2000,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        validate_distribution(&self.pi_uniform)?;
        validate_distribution(&self.pi_aggressive)?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Domain(format!("ema alpha {} outside (0,1]", self.ema_alpha)));
        }
        if self.sample_period == 0 {
            return Err(Error::Domain("sample period must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn validate_distribution(pi: &Distribution) -> Result<()> {
    if pi.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Domain(format!("distribution {pi:?} has a negative entry")));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("distribution {pi:?} sums to {sum}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutState {
    pub rho_ema: f64,
    pub step: usize,
}

impl Default for RolloutState {
    fn default() -> Self {
        Self { rho_ema: 0.0, step: 0 }
    }
}

/// `(1 − ρ)·π_uniform + ρ·π_aggressive`.
pub fn pi_of_rho(rho: f64, config: &RolloutConfig) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho {rho} outside [0,1]")));
    }
    Ok(std::array::from_fn(|k| {
        (1.0 - rho) * config.pi_uniform[k] + rho * config.pi_aggressive[k]
    }))
}

pub fn update_ema(state: RolloutState, rho_sample: f64, config: &RolloutConfig) -> RolloutState {
    let a = config.ema_alpha;
    let rho = ((1.0 - a) * state.rho_ema + a * rho_sample.clamp(0.0, 1.0)).clamp(0.0, 1.0);
    RolloutState { rho_ema: rho, ..state }
}

/// Uniform during warm-up, `π(ρ_ema)` afterwards.
pub fn current_pi(state: &RolloutState, config: &RolloutConfig) -> Distribution {
    if state.step < config.warmup {
        config.pi_uniform
    } else {
        pi_of_rho(state.rho_ema.clamp(0.0, 1.0), config).expect("clamped rho is in range")
    }
}

/// Inverse-CDF categorical draw at position `counter` of `rng`.
pub fn sample_level(pi: &Distribution, rng: &CounterRng, counter: u64) -> Result<LayerId> {
    validate_distribution(pi)?;
    let u = rng.uniform_at(counter);
    let mut acc = 0.0;
    for (k, p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return LayerId::new(k as u8);
        }
    }
    // u landed in the rounding gap above the partial sums: take the last
    // level with non-zero mass
    let last = pi.iter().rposition(|p| *p > 0.0).unwrap_or(2);
    LayerId::new(last as u8)
}

/// Training-loop driver: periodic activation-rate sampling into the EMA.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: RolloutConfig,
    state: RolloutState,
    rng: CounterRng,
}

impl Scheduler {
    pub fn new(config: RolloutConfig, rng: CounterRng) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: RolloutState::default(), rng })
    }

    pub fn state(&self) -> RolloutState {
        self.state
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }

    pub fn pi(&self) -> Distribution {
        current_pi(&self.state, &self.config)
    }

    pub fn is_sample_step(&self, step: usize) -> bool {
        step % self.config.sample_period == 0
    }

    pub fn set_step(&mut self, step: usize) {
        self.state.step = step;
    }

    /// Feeds a fresh activation-rate sample into the EMA.
    pub fn observe(&mut self, rho_sample: f64) {
        self.state = update_ema(self.state, rho_sample, &self.config);
    }

    pub fn sample(&self) -> Result<LayerId> {
        sample_level(&self.pi(), &self.rng, self.state.step as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RolloutConfig {
        RolloutConfig::default()
    }

    #[test]
    fn pi_endpoints_and_midpoint() {
        assert_eq!(pi_of_rho(0.0, &cfg()).unwrap(), PI_UNIFORM);
        assert_eq!(pi_of_rho(1.0, &cfg()).unwrap(), PI_AGGRESSIVE);
        let mid = pi_of_rho(0.5, &cfg()).unwrap();
        for (got, want) in mid.iter().zip([0.24167, 0.31667, 0.44167]) {
            assert!((got - want).abs() < 1e-5);
        }
        assert!(pi_of_rho(1.01, &cfg()).is_err());
        assert!(pi_of_rho(-0.01, &cfg()).is_err());
    }

    #[test]
    fn pi_is_affine_and_valid() {
        for k in 0..=10 {
            let rho = k as f64 / 10.0;
            let pi = pi_of_rho(rho, &cfg()).unwrap();
            validate_distribution(&pi).unwrap();
            for c in 0..3 {
                let lerp = PI_UNIFORM[c] + rho * (PI_AGGRESSIVE[c] - PI_UNIFORM[c]);
                assert!((pi[c] - lerp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_examples() {
        let s = update_ema(RolloutState::default(), 1.0, &cfg());
        assert!((s.rho_ema - 0.05).abs() < 1e-15);
        let s = RolloutState { rho_ema: 0.37, step: 3 };
        assert!((update_ema(s, 0.37, &cfg()).rho_ema - 0.37).abs() < 1e-15);
        let mut s = RolloutState::default();
        for _ in 0..200 {
            s = update_ema(s, 1.0, &cfg());
        }
        assert!((s.rho_ema - (1.0 - 0.95f64.powi(200))).abs() < 1e-12);
        assert!((s.rho_ema - 0.99996).abs() < 1e-5);
    }

    #[test]
    fn ema_contracts_by_one_minus_alpha() {
        let a = RolloutState { rho_ema: 0.9, step: 0 };
        let b = RolloutState { rho_ema: 0.2, step: 0 };
        let gap = (update_ema(a, 0.5, &cfg()).rho_ema - update_ema(b, 0.5, &cfg()).rho_ema).abs();
        assert!((gap - 0.95 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn warmup_boundary() {
        let c = cfg();
        assert_eq!(current_pi(&RolloutState { rho_ema: 0.8, step: 0 }, &c), PI_UNIFORM);
        assert_eq!(current_pi(&RolloutState { rho_ema: 1.0, step: 1999 }, &c), PI_UNIFORM);
        assert_eq!(current_pi(&RolloutState { rho_ema: 1.0, step: 2000 }, &c), PI_AGGRESSIVE);
    }

    #[test]
    fn degenerate_sampling() {
        let rng = CounterRng::new(3, 4);
        for c in 0..1000 {
            assert_eq!(sample_level(&[1.0, 0.0, 0.0], &rng, c).unwrap(), LayerId::STATIC);
            assert_eq!(sample_level(&[0.0, 0.0, 1.0], &rng, c).unwrap(), LayerId::LOCAL);
        }
        assert!(sample_level(&[0.5, 0.6, 0.0], &rng, 0).is_err());
    }

    #[test]
    fn sampling_frequencies() {
        let rng = CounterRng::new(11, 12);
        let mut counts = [0usize; 3];
        let draws = 300_000;
        for c in 0..draws {
            counts[sample_level(&PI_UNIFORM, &rng, c).unwrap().index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.01);
        }
        let mut counts = [0usize; 3];
        for c in 0..100_000 {
            counts[sample_level(&PI_AGGRESSIVE, &rng, c).unwrap().index()] += 1;
        }
        for (c, p) in counts.iter().zip(PI_AGGRESSIVE) {
            assert!((*c as f64 / 1e5 - p).abs() < 0.01);
        }
    }

    #[test]
    fn scheduler_pi_constant_between_samples() {
        let mut s = Scheduler::new(RolloutConfig { warmup: 0, ..cfg() }, CounterRng::new(0, 0)).unwrap();
        let mut last = s.pi();
        for step in 0..1000 {
            s.set_step(step);
            if s.is_sample_step(step) {
                s.observe(0.8);
            } else {
                assert_eq!(s.pi(), last);
            }
            last = s.pi();
        }
        assert!(s.state().rho_ema > 0.0);
    }
}
