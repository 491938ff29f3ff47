//! Release gate: the eleven acceptance checks, each with its own oracle.
//!
//! Trained runs are cached per process so criteria that share a scene and
//! seed train it once.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use num_rational::BigRational;
use serde::Serialize;

use crate::asset::{AnchorSet, DeformationTable, LayerId, MaskBank};
use crate::bitstream::{compressed_len, decode_prefix, encode, manifest, pack_indices, reconstruct, ContainerQuant, DecodedModel, EncodeConfig};
use crate::config::RunConfig;
use crate::entropy::{bin_mass, bit_cost_with_floor, fit_prior, quantize, AttributePrior, MASS_FLOOR};
use crate::error::{Error, Result};
use crate::losses::{level_loss_for_mask, sample_pairs, LevelTerms, LossWeights};
use crate::rng::{streams, CounterRng, Sequence};
use crate::rollout::{pi_of_rho, RolloutConfig, PI_AGGRESSIVE, PI_UNIFORM};
use crate::stream::{
    first_frame_latency, mb_to_bytes, parse_decimal, simulate, table6, to_f64, BandwidthTrace, Duration as SegDuration,
    Segment, StallPolicy,
};
use crate::toyscene::{binarized_fraction, make_scene_with, train_masks, SceneKind, SceneParams, TrainReport};

/// Bin-mass floor substituted by the corrupted-entropy hook.
pub const CORRUPT_MASS_FLOOR: f64 = 1e-5;

pub const CRITERIA: [(u8, &str, u64); 11] = [
    (1, "latency table reproduction", 1),
    (2, "rollout distribution endpoints", 1),
    (3, "entropy model vs integration oracle", 5),
    (4, "loss gradients vs finite differences", 10),
    (5, "prefix decodability", 30),
    (6, "per-level PSNR monotonicity", 600),
    (7, "activation-rate direction", 600),
    (8, "rate-weight sweep sparsification", 600),
    (9, "mask binarization", 600),
    (10, "rate model vs compressed size", 30),
    (11, "simulator exactness", 1),
];

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub config: RunConfig,
    /// Replaces the bit-cost mass floor with [`CORRUPT_MASS_FLOOR`].
    pub corrupt_entropy: bool,
}

impl VerifyOptions {
    pub fn new(config: RunConfig) -> Self {
        Self { config, corrupt_entropy: false }
    }

    fn seeds(&self) -> [u64; 3] {
        let s = self.config.seed;
        [s + 1, s + 2, s + 3]
    }

    fn mass_floor(&self) -> f64 {
        if self.corrupt_entropy {
            CORRUPT_MASS_FLOOR
        } else {
            MASS_FLOOR
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_s: f64,
    pub budget_s: u64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<38} {} ({:.2} s): {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed_s,
            self.detail
        )
    }
}

pub fn run_criterion(id: u8, opts: &VerifyOptions) -> CriterionOutcome {
    let (_, name, budget) = CRITERIA
        .iter()
        .copied()
        .find(|(i, _, _)| *i == id)
        .unwrap_or((id, "unknown criterion", 0));
    let start = Instant::now();
    let result = match id {
        1 => latency_table_check(),
        2 => rollout_endpoints_check(),
        3 => entropy_oracle_check(opts.mass_floor()),
        4 => gradient_check(),
        5 => prefix_check(),
        6 => monotonicity_check(opts),
        7 => adaptivity_check(opts),
        8 => sweep_check(opts),
        9 => binarization_check(opts),
        10 => rate_correlation_check(),
        11 => simulator_check(),
        _ => Err(format!("no criterion {id}")),
    };
    let elapsed = start.elapsed();
    let over = elapsed > Duration::from_secs(budget);
    let (mut passed, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if over && passed {
        passed = false;
        detail = format!("{detail}; exceeded {budget} s budget");
    }
    CriterionOutcome { id, name, passed, detail, elapsed_s: elapsed.as_secs_f64(), budget_s: budget }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CriterionOutcome> {
    CRITERIA.iter().map(|(id, _, _)| run_criterion(*id, opts)).collect()
}

pub fn report(outcomes: &[CriterionOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let _ = writeln!(out, "{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    let _ = writeln!(out, "{passed}/{} criteria passed", outcomes.len());
    out
}

type Check = std::result::Result<String, String>;

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---- 1 -------------------------------------------------------------------

/// Cells as printed in the reference table.
const TABLE6_PRINTED: [[&str; 3]; 6] = [
    ["929.6", "185.9", "37.2"],
    ["437.6", "87.5", "17.5"],
    ["314.0", "62.8", "12.6"],
    ["73.5", "14.7", "2.94"],
    ["27.5", "5.5", "1.10"],
    ["1.74", "0.35", "0.07"],
];

fn latency_table_check() -> Check {
    let table = table6();
    let rounded = table.rounded();
    if rounded.len() != 6 {
        return Err(format!("expected 6 rows, got {}", rounded.len()));
    }
    let mut mismatches = Vec::new();
    for (r, (row, want)) in rounded.iter().zip(TABLE6_PRINTED).enumerate() {
        for (c, (got, want)) in row.iter().zip(want).enumerate() {
            if lib(parse_decimal(got))? != lib(parse_decimal(want))? {
                mismatches.push(format!("row {r} col {c}: {got} vs {want}"));
            }
        }
    }
    if mismatches.is_empty() {
        Ok("18/18 cells match".into())
    } else {
        Err(mismatches.join("; "))
    }
}

// ---- 2 -------------------------------------------------------------------

fn rollout_endpoints_check() -> Check {
    let cfg = RolloutConfig::default();
    let p0 = lib(pi_of_rho(0.0, &cfg))?;
    let p1 = lib(pi_of_rho(1.0, &cfg))?;
    if p0 != [1.0 / 3.0; 3] || p0 != PI_UNIFORM {
        return Err(format!("pi(0) = {p0:?}"));
    }
    if p1 != [0.15, 0.30, 0.55] || p1 != PI_AGGRESSIVE {
        return Err(format!("pi(1) = {p1:?}"));
    }
    let mut worst = 0.0f64;
    for k in 0..=10 {
        let rho = k as f64 / 10.0;
        let p = lib(pi_of_rho(rho, &cfg))?;
        for c in 0..3 {
            worst = worst.max((p[c] - ((1.0 - rho) * p0[c] + rho * p1[c])).abs());
        }
    }
    if worst <= 1e-9 {
        Ok(format!("endpoints exact, max affine deviation {worst:.1e}"))
    } else {
        Err(format!("affine deviation {worst:.3e} > 1e-9"))
    }
}

// ---- 3 -------------------------------------------------------------------

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Standard normal mass over `[lo, hi]` by composite quadrature of the density.
fn oracle_mass(lo: f64, hi: f64, nodes: &[(f64, f64)]) -> f64 {
    let (lo, hi) = (lo.max(-40.0), hi.min(40.0));
    if hi <= lo {
        return 0.0;
    }
    let pieces = ((hi - lo) / 0.25).ceil().max(1.0) as usize;
    let width = (hi - lo) / pieces as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for p in 0..pieces {
        let mid = lo + (p as f64 + 0.5) * width;
        for (x, w) in nodes {
            let z = mid + 0.5 * width * x;
            total += w * 0.5 * width * norm * (-0.5 * z * z).exp();
        }
    }
    total
}

fn entropy_oracle_check(floor: f64) -> Check {
    let nodes = gauss_legendre(20);
    let mut seq = Sequence::new(CounterRng::new(3, streams::VERIFY));
    let (mut worst, mut clamp_mismatch, mut clamped, mut near_floor) = (0.0f64, 0usize, 0usize, 0usize);
    for k in 0..1000 {
        let mean = seq.range(-2.0, 2.0);
        let (std, q, z) = if k % 10 == 0 {
            // bins whose mass sits just above the floor
            let std = seq.range(0.5, 2.0);
            let sign = if seq.uniform() < 0.5 { -1.0 } else { 1.0 };
            (std, std / 16.0 * seq.range(0.5, 2.0), sign * seq.range(3.9, 4.4))
        } else {
            let std = (seq.range(0.01f64.ln(), 2.0f64.ln())).exp();
            let q = if seq.uniform() < 0.5 { 1.0 / 16.0 } else { seq.range((1.0f64 / 256.0).ln(), 0.0).exp() };
            (std, q, seq.range(-7.0, 7.0))
        };
        let a = mean + z * std;
        let prior = lib(AttributePrior::new(mean, std, q))?;
        let mass = oracle_mass((a - q / 2.0 - mean) / std, (a + q / 2.0 - mean) / std, &nodes);
        let expected = (-mass.max(MASS_FLOOR).log2()).max(0.0);
        let got = bit_cost_with_floor(a, &prior, floor);
        worst = worst.max((got - expected).abs());
        let oracle_clamps = mass < MASS_FLOOR;
        let model_clamps = bin_mass(a, &prior) < floor;
        if oracle_clamps != model_clamps && (mass - MASS_FLOOR).abs() > 1e-12 {
            clamp_mismatch += 1;
        }
        clamped += oracle_clamps as usize;
        near_floor += (MASS_FLOOR..CORRUPT_MASS_FLOOR).contains(&mass) as usize;
    }
    let detail = format!(
        "1000 configurations, max |Δbits| {worst:.2e}, {clamped} clamped, {near_floor} near the floor, {clamp_mismatch} clamp mismatches"
    );
    if worst <= 1e-6 && clamp_mismatch == 0 && clamped > 0 && near_floor > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 4 -------------------------------------------------------------------

fn gradient_check() -> Check {
    let mut seq = Sequence::new(CounterRng::new(4, streams::VERIFY));
    let h = 1e-6;
    let mut worst = [0.0f64; 3];
    let mut checked = 0usize;
    for k in 0..100u64 {
        let n = 8 + seq.below(17) as usize;
        let mask: Vec<f64> = (0..n).map(|_| seq.range(0.02, 0.98)).collect();
        let positions: Vec<f64> = (0..2 * n).map(|_| seq.uniform()).collect();
        let costs: Vec<f64> = (0..n).map(|_| seq.range(0.0, 30.0)).collect();
        let pairs = lib(sample_pairs(n, 4 * n, k))?;
        let level = lib(LayerId::new(seq.below(3) as u8))?;
        let terms = LevelTerms { anchor_costs: &costs, positions: &positions, dim: 2, pairs: &pairs };
        let base = LossWeights::default();
        let variants = [
            LossWeights { lambda_layer: [1.0; 3], lambda_temporal: 0.0, binary_enabled: false, smooth_enabled: false, ..base },
            LossWeights { lambda_layer: [0.0; 3], lambda_temporal: 1.0, binary_enabled: true, smooth_enabled: false, ..base },
            LossWeights { lambda_layer: [0.0; 3], lambda_temporal: 1.0, binary_enabled: false, smooth_enabled: true, ..base },
        ];
        for (v, w) in variants.iter().enumerate() {
            let analytic = lib(level_loss_for_mask(0.0, &mask, level, w, &terms))?.grad;
            for i in 0..n {
                // the smoothness term has a kink where two paired masks meet
                let near_kink = pairs.iter().any(|&(a, b)| (a == i || b == i) && (mask[a] - mask[b]).abs() < 4.0 * h);
                if v == 2 && near_kink {
                    continue;
                }
                let mut plus = mask.clone();
                plus[i] += h;
                let mut minus = mask.clone();
                minus[i] -= h;
                let fp = lib(level_loss_for_mask(0.0, &plus, level, w, &terms))?.total;
                let fm = lib(level_loss_for_mask(0.0, &minus, level, w, &terms))?.total;
                let fd = (fp - fm) / (2.0 * h);
                let scale = analytic[i].abs().max(fd.abs());
                let err = if scale < 1e-9 { 0.0 } else { (analytic[i] - fd).abs() / scale };
                worst[v] = worst[v].max(err);
                checked += 1;
            }
        }
    }
    let detail = format!(
        "{checked} components, max relative error rate {:.1e}, binary {:.1e}, smooth {:.1e}",
        worst[0], worst[1], worst[2]
    );
    if worst.iter().all(|w| *w <= 1e-4) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 5 -------------------------------------------------------------------

/// Checks that `decoded` reproduces the quantized source exactly.
pub fn check_round_trip(
    anchors: &AnchorSet,
    bank: &MaskBank,
    deformations: &DeformationTable,
    quant: &ContainerQuant,
    decoded: &DecodedModel,
) -> std::result::Result<(), String> {
    let q = quant;
    let dim = anchors.dim();
    let fdim = anchors.feature_dim();
    let n = anchors.len();
    let total = decoded.anchor_ids.len();
    let max = decoded.max_level.index();
    let active = |level: usize, i: usize| bank.level(LayerId::ALL[level])[i] > bank.threshold();
    let mut expected_ids = Vec::new();
    for level in 0..=max {
        for i in 0..n {
            if active(level, i) && !(0..level).any(|l| active(l, i)) {
                expected_ids.push(i as u32);
            }
        }
    }
    if decoded.anchor_ids != expected_ids {
        return Err(format!("anchor ids {:?} vs expected {:?}", decoded.anchor_ids, expected_ids));
    }
    let eq = |what: &str, k: usize, got: f64, want: f64| {
        if got == want {
            Ok(())
        } else {
            Err(format!("{what} of decoded anchor {k}: {got} vs {want}"))
        }
    };
    let g = deformations.global();
    let l = deformations.local();
    for (k, &id) in decoded.anchor_ids.iter().enumerate() {
        let i = id as usize;
        let a = &decoded.anchors;
        for c in 0..dim {
            eq("position", k, a.position(k)[c], reconstruct(anchors.position(i)[c], q.position))?;
            eq("offset", k, a.offset(k)[c], reconstruct(anchors.offset(i)[c], q.offset))?;
        }
        for c in 0..fdim {
            eq("feature", k, a.feature(k)[c], reconstruct(anchors.feature(i)[c], q.feature))?;
        }
        eq("scale", k, a.scales()[k], reconstruct(anchors.scales()[i].ln(), q.scale).exp())?;
        eq("opacity", k, a.opacities()[k], reconstruct(anchors.opacities()[i], q.opacity))?;
        for c in 0..3 {
            eq("color", k, a.colors()[k][c], reconstruct(anchors.colors()[i][c], q.color))?;
        }
        for level in 0..3 {
            let want = if level <= max && active(level, i) { 1.0 } else { 0.0 };
            eq("mask", k, decoded.masks.level(LayerId::ALL[level])[k], want)?;
        }
        let t_count = deformations.timesteps().len();
        if max >= 1 {
            let dg = decoded.deformations.global().ok_or("global layer missing")?;
            let sg = g.ok_or("source global layer missing")?;
            for t in 0..t_count {
                for c in 0..dim {
                    let want = if active(1, i) { reconstruct(sg.displacements[(t * n + i) * dim + c], q.displacement) } else { 0.0 };
                    eq("displacement", k, dg.displacements[(t * total + k) * dim + c], want)?;
                }
                for c in 0..fdim {
                    let want =
                        if active(1, i) { reconstruct(sg.feature_residuals[(t * n + i) * fdim + c], q.feature_residual) } else { 0.0 };
                    eq("feature residual", k, dg.feature_residuals[(t * total + k) * fdim + c], want)?;
                }
            }
        } else if decoded.deformations.global().is_some() {
            return Err("base-only prefix carries a global layer".into());
        }
        if max >= 2 {
            let dl = decoded.deformations.local().ok_or("local layer missing")?;
            let sl = l.ok_or("source local layer missing")?;
            for t in 0..t_count {
                let on = active(2, i);
                let r = |v: f64| if on { reconstruct(v, q.local) } else { 0.0 };
                for c in 0..dim {
                    eq("local position", k, dl.d_mu[(t * total + k) * dim + c], r(sl.d_mu[(t * n + i) * dim + c]))?;
                }
                eq("local scale", k, dl.d_sigma[t * total + k], r(sl.d_sigma[t * n + i]))?;
                eq("local opacity", k, dl.d_alpha[t * total + k], r(sl.d_alpha[t * n + i]))?;
                for c in 0..3 {
                    eq("local color", k, dl.d_color[t * total + k][c], r(sl.d_color[t * n + i][c]))?;
                }
            }
        } else if decoded.deformations.local().is_some() {
            return Err("prefix without layer 2 carries a local layer".into());
        }
    }
    Ok(())
}

/// Random scene plus random per-level masks with pruned entries.
pub fn random_container_inputs(k: u64) -> Result<(AnchorSet, MaskBank, DeformationTable)> {
    let mut seq = Sequence::new(CounterRng::new(5, streams::VERIFY).fork(k));
    let kinds = [SceneKind::Static, SceneKind::GlobalMotion, SceneKind::Mixed, SceneKind::MotionDense];
    let kind = kinds[k as usize % 4];
    let n = 6 + seq.below(35) as usize;
    let t = 1 + seq.below(5) as usize;
    let params = SceneParams { width: 8, height: 8, ..SceneParams::default() };
    let scene = make_scene_with(kind, n, t, 100 + k, &params)?;
    let levels: [Vec<f64>; 3] = std::array::from_fn(|_| {
        (0..n).map(|_| if seq.uniform() < 0.3 { 0.0 } else { seq.range(0.0, 1.0) }).collect()
    });
    let mut levels = levels;
    levels[0][0] = 1.0;
    let bank = MaskBank::new(levels, 0.01)?;
    Ok((scene.anchors, bank, scene.deformations))
}

fn prefix_check() -> Check {
    let cfg = EncodeConfig::default();
    let mut prefixes = 0usize;
    for k in 0..20u64 {
        let (anchors, bank, defs) = lib(random_container_inputs(k))?;
        let bytes = lib(encode(&anchors, &bank, &defs, &cfg))?;
        let man = lib(manifest(&bytes))?;
        if man.total_bytes() != bytes.len() as u64 {
            return Err(format!("container {k}: manifest total {} vs {} bytes", man.total_bytes(), bytes.len()));
        }
        let mut cuts = Vec::new();
        for (level, end) in man.cumulative_bytes.iter().enumerate() {
            cuts.push((*end as usize, level));
            if let Some(next) = man.cumulative_bytes.get(level + 1) {
                cuts.push(((*end + *next) as usize / 2, level));
                cuts.push((*next as usize - 1, level));
            }
        }
        for (cut, level) in cuts {
            let decoded = decode_prefix(&bytes[..cut]).map_err(|e| format!("container {k} cut {cut}: {e}"))?;
            if decoded.max_level.index() != level {
                return Err(format!("container {k} cut {cut}: max level {} vs {level}", decoded.max_level.index()));
            }
            check_round_trip(&anchors, &bank, &defs, &cfg.quant, &decoded).map_err(|e| format!("container {k} cut {cut}: {e}"))?;
            prefixes += 1;
        }
        match decode_prefix(&bytes[..man.cumulative_bytes[0] as usize - 1]) {
            Err(Error::InsufficientData(_)) => {}
            other => return Err(format!("container {k}: truncated layer 0 gave {other:?}")),
        }
    }
    Ok(format!("20 containers, {prefixes} prefixes decoded and matched"))
}

// ---- training-backed criteria ---------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RunKey {
    kind: SceneKind,
    seed: u64,
    lambda_bits: Option<u64>,
    binary: bool,
    config: String,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub bank: MaskBank,
    pub report: TrainReport,
    /// Compressed Layer-0 chunk size; `None` when level 0 was pruned empty.
    pub layer0_bytes: Option<u64>,
}

type Slot = Arc<OnceLock<std::result::Result<Arc<TrainedRun>, String>>>;

fn run_cache() -> &'static Mutex<HashMap<RunKey, Slot>> {
    static CACHE: OnceLock<Mutex<HashMap<RunKey, Slot>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Trains (or fetches) a run of `config` on `kind`/`seed`, optionally with a
/// uniform rate weight and with the binary-entropy term toggled.
pub fn trained(
    config: &RunConfig,
    kind: SceneKind,
    seed: u64,
    lambda: Option<f64>,
    binary: bool,
) -> std::result::Result<Arc<TrainedRun>, String> {
    let key = RunKey { kind, seed, lambda_bits: lambda.map(f64::to_bits), binary, config: config.to_toml() };
    let slot = {
        let mut map = run_cache().lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key).or_default().clone()
    };
    slot.get_or_init(|| {
        let scene = lib(make_scene_with(kind, config.anchor_count, config.timestep_count, seed, &config.scene_params()))?;
        let mut weights = config.loss_weights();
        if let Some(l) = lambda {
            weights.lambda_layer = [l; 3];
        }
        weights.binary_enabled = binary && config.binary_loss_enabled;
        let (bank, report) = lib(train_masks(&scene, &weights, &config.rollout(), &config.train_settings(), seed))?;
        let layer0_bytes = match encode(&scene.anchors, &bank, &scene.deformations, &config.encode_config()) {
            Ok(bytes) => Some(lib(manifest(&bytes))?.layer_bytes[0]),
            Err(Error::EmptyBaseLayer) => None,
            Err(e) => return Err(e.to_string()),
        };
        Ok(Arc::new(TrainedRun { bank, report, layer0_bytes }))
    })
    .clone()
}

fn monotonicity_check(opts: &VerifyOptions) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in opts.seeds() {
        let run = trained(&opts.config, SceneKind::MotionDense, seed, None, true)?;
        let [p0, p1, p2] = run.report.psnr_db;
        let good = p0 <= p1 && p1 <= p2 && p2 - p0 >= 0.5;
        ok &= good;
        parts.push(format!("seed {seed}: {p0:.2}/{p1:.2}/{p2:.2} dB"));
    }
    if ok {
        Ok(parts.join(", "))
    } else {
        Err(parts.join(", "))
    }
}

fn adaptivity_check(opts: &VerifyOptions) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in opts.seeds() {
        let dense = trained(&opts.config, SceneKind::MotionDense, seed, None, true)?;
        let flat = trained(&opts.config, SceneKind::Static, seed, None, true)?;
        let gap = dense.report.final_rho_ema - flat.report.final_rho_ema;
        let pi_dev = flat
            .report
            .final_pi
            .iter()
            .zip(opts.config.pi_uniform)
            .map(|(p, u)| (p - u).abs())
            .fold(0.0, f64::max);
        ok &= gap >= 0.2 && pi_dev <= 0.05;
        parts.push(format!(
            "seed {seed}: rho_ema {:.3} vs {:.3} (gap {gap:.3}), static pi deviation {pi_dev:.3}",
            dense.report.final_rho_ema, flat.report.final_rho_ema
        ));
    }
    if ok {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

pub const LAMBDA_SWEEP: [f64; 3] = [0.00025, 0.01, 0.04];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPoint {
    pub active_level0: usize,
    pub layer0_bytes: u64,
}

/// Level-0 active count and compressed Layer-0 size for each sweep weight.
pub fn lambda_sweep(config: &RunConfig, kind: SceneKind, seed: u64) -> std::result::Result<Vec<SweepPoint>, String> {
    LAMBDA_SWEEP
        .iter()
        .map(|l| {
            let run = trained(config, kind, seed, Some(*l), true)?;
            Ok(SweepPoint { active_level0: run.report.active_counts[0], layer0_bytes: run.layer0_bytes.unwrap_or(0) })
        })
        .collect()
}

fn sweep_check(opts: &VerifyOptions) -> Check {
    let seed = opts.seeds()[0];
    let points = lambda_sweep(&opts.config, SceneKind::Mixed, seed)?;
    let counts: Vec<usize> = points.iter().map(|p| p.active_level0).collect();
    let sizes: Vec<u64> = points.iter().map(|p| p.layer0_bytes).collect();
    let ok = counts.windows(2).all(|w| w[1] <= w[0]) && sizes.windows(2).all(|w| w[1] <= w[0]);
    let detail = format!("mixed scene seed {seed}: level-0 active {counts:?}, Layer-0 bytes {sizes:?}");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn binarization_check(opts: &VerifyOptions) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in opts.seeds() {
        let with = trained(&opts.config, SceneKind::Static, seed, None, true)?;
        let without = trained(&opts.config, SceneKind::Static, seed, None, false)?;
        let a = binarized_fraction(&with.bank, 0.05);
        let b = binarized_fraction(&without.bank, 0.05);
        ok &= a >= 0.9 && b < a;
        parts.push(format!("seed {seed}: {a:.3} with, {b:.3} without binary term"));
    }
    if ok {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

// ---- 10 ------------------------------------------------------------------

/// Average ranks, ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn rate_correlation_check() -> Check {
    let q = 1.0 / 16.0;
    let rng = CounterRng::new(10, streams::VERIFY);
    let mut bits = Vec::new();
    let mut sizes = Vec::new();
    for k in 0..20u64 {
        let sigma = 0.01 * 200f64.powf(k as f64 / 19.0);
        let r = rng.fork(k);
        let values: Vec<f64> = (0..4096).map(|c| sigma * r.normal_at(c)).collect();
        let prior = lib(fit_prior(values.iter().copied(), q))?;
        bits.push(values.iter().map(|v| bit_cost_with_floor(*v, &prior, MASS_FLOOR)).sum::<f64>());
        let idx: Vec<i32> = values.iter().map(|v| quantize(*v, q).map(|p| p.0)).collect::<Result<_>>().map_err(|e| e.to_string())?;
        sizes.push(lib(compressed_len(&pack_indices(&idx), crate::bitstream::DEFAULT_PRESET))? as f64);
    }
    let rho = spearman(&bits, &sizes);
    let detail = format!("Spearman {rho:.4} over 20 sigma values ({:.0}..{:.0} bits, {}..{} bytes)", bits[0], bits[19], sizes[0], sizes[19]);
    if rho >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 11 ------------------------------------------------------------------

fn split_halves(trace: &BandwidthTrace) -> Result<BandwidthTrace> {
    let two = BigRational::from_integer(2.into());
    let mut segs = Vec::new();
    for s in trace.segments() {
        match &s.duration {
            SegDuration::Finite(d) => {
                let half = d / &two;
                segs.push(Segment { duration: SegDuration::Finite(half.clone()), mbps: s.mbps.clone() });
                segs.push(Segment { duration: SegDuration::Finite(half), mbps: s.mbps.clone() });
            }
            SegDuration::Forever => segs.push(s.clone()),
        }
    }
    BandwidthTrace::new(segs)
}

fn simulator_check() -> Check {
    let mut worst = 0.0f64;
    let mut constant_cases = 0usize;
    let sizes = ["232.4", "109.4", "78.5", "18.37", "6.88", "0.436", "1.623", "6.898", "0.001"];
    let bands = ["2", "10", "50", "3.7", "0.5", "1000"];
    for s in sizes {
        for b in bands {
            let size = lib(parse_decimal(s))?;
            let bw = lib(parse_decimal(b))?;
            let bytes = mb_to_bytes(&size);
            let man = lib(crate::bitstream::LayerManifest::from_cumulative(vec![bytes, bytes + 1000, bytes + 5000]))?;
            let tl = lib(simulate(&man, &lib(BandwidthTrace::constant(bw))?, StallPolicy::Freeze))?;
            let t = to_f64(tl.first_frame_time.as_ref().ok_or("no first frame under a constant trace")?);
            let formula = lib(first_frame_latency(s.parse().unwrap(), b.parse().unwrap()))?;
            worst = worst.max((t - formula).abs());
            constant_cases += 1;
        }
    }
    let mut seq = Sequence::new(CounterRng::new(11, streams::VERIFY));
    for k in 0..200 {
        let segs = 1 + seq.below(6) as usize;
        let mut list = Vec::new();
        for j in 0..segs {
            let mbps = if seq.uniform() < 0.25 { "0".to_string() } else { format!("{}.{:03}", seq.below(20), seq.below(1000)) };
            let dur = if j + 1 == segs && k % 2 == 0 { "inf".to_string() } else { format!("{}.{:03}", seq.below(5), 1 + seq.below(999)) };
            list.push(lib(Segment::new(&dur, &mbps))?);
        }
        let trace = lib(BandwidthTrace::new(list))?;
        let s0 = 1 + seq.below(2_000_000);
        let man = lib(crate::bitstream::LayerManifest::from_cumulative(vec![s0, s0 + 1 + seq.below(3_000_000), s0 + 5_000_001]))?;
        let a = lib(simulate(&man, &trace, StallPolicy::Freeze))?;
        let b = lib(simulate(&man, &lib(split_halves(&trace))?, StallPolicy::Freeze))?;
        if a != b {
            return Err(format!("trace {k}: splitting segments changed the timeline"));
        }
    }
    let detail = format!("{constant_cases} constant traces, max |Δt| {worst:.1e} s; 200 split traces identical");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_nodes_integrate_polynomials() {
        let nodes = gauss_legendre(20);
        let sum: f64 = nodes.iter().map(|(_, w)| w).sum();
        assert!((sum - 2.0).abs() < 1e-13);
        let x38: f64 = nodes.iter().map(|(x, w)| w * x.powi(38)).sum();
        assert!((x38 - 2.0 / 39.0).abs() < 1e-13);
    }

    #[test]
    fn oracle_mass_known_values() {
        let nodes = gauss_legendre(20);
        assert!((oracle_mass(-0.5, 0.5, &nodes) - 0.382_924_922_548_026).abs() < 1e-14);
        assert!((oracle_mass(-40.0, 40.0, &nodes) - 1.0).abs() < 1e-13);
        // upper tail beyond 5: 2.866515718791939e-7
        assert!((oracle_mass(5.0, 40.0, &nodes) / 2.866_515_718_791_939e-7 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spearman_handles_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn cheap_criteria_pass_and_hook_trips_entropy() {
        let opts = VerifyOptions::new(RunConfig::default());
        for id in [1, 2, 3, 11] {
            let o = run_criterion(id, &opts);
            assert!(o.passed, "{}", o.line());
        }
        let corrupt = VerifyOptions { corrupt_entropy: true, ..opts };
        assert!(!run_criterion(3, &corrupt).passed);
    }
}
