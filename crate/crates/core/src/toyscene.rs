//! Synthetic 2D scenes, an additive isotropic splatting renderer and the
//! mask-training loop.
//!
//! The renderer routes anchors to the requested level, gates opacity and
//! scale by the level's mask, and accumulates
//! `α'·c·exp(−‖p−μ‖²/(2s'²))` per pixel before clamping to `[0,1]`.
//! Pixel `(x, y)` samples scene point `((x+½)/W, (y+½)/H)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asset::{activation_rate, route_level, AnchorSet, DeformationTable, GlobalField, LayerId, LocalField, MaskBank};
use crate::entropy::{anchor_bit_costs, estimate_priors, QuantSteps};
use crate::error::{Error, Result};
use crate::losses::{level_loss_for_mask, sample_pairs_from, LevelTerms, LossWeights};
use crate::rng::{streams, CounterRng, Sequence};
use crate::rollout::{Distribution, RolloutConfig, Scheduler};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const FEATURE_DIM: usize = 2;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Gaussian support radius in standard deviations used for incremental
/// finite differences; `exp(−R²/2) ≈ 1.3e−14`.
const SUPPORT_SIGMAS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved RGB, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Static,
    GlobalMotion,
    Mixed,
    MotionDense,
}

impl SceneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SceneKind::Static => "static",
            SceneKind::GlobalMotion => "global-motion",
            SceneKind::Mixed => "mixed",
            SceneKind::MotionDense => "motion-dense",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(SceneKind::Static),
            "global-motion" => Ok(SceneKind::GlobalMotion),
            "mixed" => Ok(SceneKind::Mixed),
            "motion-dense" => Ok(SceneKind::MotionDense),
            other => Err(Error::Domain(format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub kind: SceneKind,
    pub anchors: AnchorSet,
    pub deformations: DeformationTable,
    pub width: usize,
    pub height: usize,
    /// One frame per timestep, rendered at level 2 with all masks on.
    pub ground_truth: Vec<Image>,
}

/// A renderable isotropic Gaussian.
#[derive(Debug, Clone, Copy)]
struct Splat {
    cx: f64,
    cy: f64,
    sigma: f64,
    alpha: f64,
    color: [f64; 3],
}

/// Gaussians for the routed anchors before mask gating. Centers follow the
/// routed (ungated) scale so a mask changes extent but not placement.
fn ungated_splats(routed: &AnchorSet) -> Result<Vec<Splat>> {
    if routed.dim() != 2 {
        return Err(Error::Dimension(format!("toy renderer is 2D, anchors are {}D", routed.dim())));
    }
    Ok((0..routed.len())
        .map(|i| {
            let c = routed.center(i);
            Splat {
                cx: c[0],
                cy: c[1],
                sigma: routed.scales()[i],
                alpha: routed.opacities()[i],
                color: routed.colors()[i],
            }
        })
        .collect())
}

fn axis_factors(center: f64, sigma: f64, count: usize, out: &mut Vec<f64>) {
    out.clear();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let n = count as f64;
    out.extend((0..count).map(|k| {
        let d = (k as f64 + 0.5) / n - center;
        (-d * d * inv).exp()
    }));
}

/// Adds `sign ×` the splat at mask value `m` into the unclamped buffer.
fn accumulate(buf: &mut [f64], w: usize, h: usize, splat: &Splat, m: f64, scratch: &mut (Vec<f64>, Vec<f64>)) {
    let alpha = splat.alpha * m;
    let sigma = splat.sigma * m;
    if alpha == 0.0 || sigma == 0.0 {
        return;
    }
    axis_factors(splat.cx, sigma.abs(), w, &mut scratch.0);
    axis_factors(splat.cy, sigma.abs(), h, &mut scratch.1);
    for (y, gy) in scratch.1.iter().enumerate() {
        if *gy == 0.0 {
            continue;
        }
        let row = &mut buf[y * w * 3..(y + 1) * w * 3];
        for (x, gx) in scratch.0.iter().enumerate() {
            let g = alpha * gx * gy;
            if g == 0.0 {
                continue;
            }
            let px = &mut row[x * 3..x * 3 + 3];
            px[0] += g * splat.color[0];
            px[1] += g * splat.color[1];
            px[2] += g * splat.color[2];
        }
    }
}

fn render_splats(splats: &[Splat], mask: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut buf = vec![0.0; w * h * 3];
    let mut scratch = (Vec::new(), Vec::new());
    for (s, m) in splats.iter().zip(mask) {
        accumulate(&mut buf, w, h, s, *m, &mut scratch);
    }
    buf
}

fn clamp_image(buf: Vec<f64>, w: usize, h: usize) -> Image {
    Image { width: w, height: h, data: buf.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() }
}

/// Renders anchors at `level` and time `t` with per-anchor `mask`.
pub fn render_anchors(
    anchors: &AnchorSet,
    deformations: &DeformationTable,
    mask: &[f64],
    level: LayerId,
    t: f64,
    width: usize,
    height: usize,
) -> Result<Image> {
    if mask.len() != anchors.len() {
        return Err(Error::Dimension(format!("{} masks for {} anchors", mask.len(), anchors.len())));
    }
    if anchors.is_empty() {
        return Ok(Image::black(width, height));
    }
    let routed = route_level(anchors, deformations, level, t)?;
    let splats = ungated_splats(&routed)?;
    Ok(clamp_image(render_splats(&splats, mask, width, height), width, height))
}

/// Renders the scene at `level` and time `t` with the bank's level mask.
pub fn render(scene: &ToyScene, bank: &MaskBank, level: LayerId, t: f64) -> Result<Image> {
    render_anchors(&scene.anchors, &scene.deformations, bank.level(level), level, t, scene.width, scene.height)
}

/// Mean absolute pixel difference.
pub fn l1_distortion(rendered: &Image, ground_truth: &Image) -> Result<f64> {
    rendered.same_shape(ground_truth)?;
    let n = rendered.data.len().max(1) as f64;
    Ok(rendered.data.iter().zip(&ground_truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn mse(rendered: &Image, ground_truth: &Image) -> Result<f64> {
    rendered.same_shape(ground_truth)?;
    let n = rendered.data.len().max(1) as f64;
    Ok(rendered.data.iter().zip(&ground_truth.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &Image, ground_truth: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(rendered, ground_truth)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Generator knobs for [`make_scene_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Amplitude of the shared rigid drift, scene units.
    pub drift_amplitude: f64,
    /// Amplitude of per-anchor local position residuals, scene units.
    pub local_amplitude: f64,
    /// Fraction of anchors carrying local residuals in `motion-dense`.
    pub local_fraction: f64,
    /// Scale range (scene units), sampled log-uniformly.
    pub scale_range: (f64, f64),
    /// Fraction of faint anchors (opacity in `faint_opacity`).
    pub faint_fraction: f64,
    pub faint_opacity: (f64, f64),
    pub opacity: (f64, f64),
    /// Spread of feature and offset values.
    pub attribute_spread: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            drift_amplitude: 0.12,
            local_amplitude: 0.06,
            local_fraction: 0.6,
            scale_range: (0.05, 0.08),
            faint_fraction: 0.12,
            faint_opacity: (0.05, 0.35),
            opacity: (0.6, 1.0),
            attribute_spread: 0.15,
        }
    }
}

pub fn make_scene(kind: SceneKind, anchor_count: usize, timesteps: usize, seed: u64) -> Result<ToyScene> {
    make_scene_with(kind, anchor_count, timesteps, seed, &SceneParams::default())
}

/// Deterministic synthetic scene generator.
pub fn make_scene_with(
    kind: SceneKind,
    anchor_count: usize,
    timesteps: usize,
    seed: u64,
    params: &SceneParams,
) -> Result<ToyScene> {
    if !(4..=1024).contains(&anchor_count) {
        return Err(Error::Domain(format!("anchor count {anchor_count} outside [4, 1024]")));
    }
    if !(1..=32).contains(&timesteps) {
        return Err(Error::Domain(format!("timestep count {timesteps} outside [1, 32]")));
    }
    if params.width == 0 || params.height == 0 {
        return Err(Error::Domain("image size must be non-zero".into()));
    }
    let n = anchor_count;
    let mut rng = Sequence::new(CounterRng::new(seed, streams::SCENE));

    let mut positions = Vec::with_capacity(2 * n);
    let mut features = Vec::with_capacity(FEATURE_DIM * n);
    let mut scales = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(2 * n);
    let mut opacities = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(rng.range(0.1, 0.9));
        positions.push(rng.range(0.1, 0.9));
        let spread = params.attribute_spread;
        for _ in 0..FEATURE_DIM {
            features.push(spread * rng.normal());
        }
        let (s0, s1) = params.scale_range;
        scales.push(rng.range(s0.ln(), s1.ln()).exp());
        offsets.push(spread * rng.normal());
        offsets.push(spread * rng.normal());
        let (a0, a1) = if rng.uniform() < params.faint_fraction { params.faint_opacity } else { params.opacity };
        opacities.push(rng.range(a0, a1));
        colors.push([rng.range(0.3, 1.0), rng.range(0.3, 1.0), rng.range(0.3, 1.0)]);
    }
    let anchors = AnchorSet::new(2, FEATURE_DIM, positions, features, scales, offsets, opacities, colors)?;

    let times: Vec<f64> = if timesteps == 1 {
        vec![0.0]
    } else {
        (0..timesteps).map(|k| k as f64 / (timesteps - 1) as f64).collect()
    };
    let mut deformations = DeformationTable::zeros(n, 2, FEATURE_DIM, times.clone())?;

    let drift = |t: f64| {
        let a = params.drift_amplitude;
        let w = std::f64::consts::TAU * t;
        [a * w.sin(), 0.5 * a * (1.0 - w.cos())]
    };

    let moving: Vec<bool> = match kind {
        SceneKind::Static => vec![false; n],
        SceneKind::GlobalMotion | SceneKind::MotionDense => vec![true; n],
        SceneKind::Mixed => (0..n).map(|_| rng.uniform() < 0.5).collect(),
    };
    if kind != SceneKind::Static {
        let g = deformations.global_mut().expect("zeros() carries a global field");
        fill_global(g, &times, &moving, &drift);
    }

    let local_fraction = match kind {
        SceneKind::Static | SceneKind::GlobalMotion => 0.0,
        SceneKind::Mixed => 0.15,
        SceneKind::MotionDense => params.local_fraction,
    };
    if local_fraction > 0.0 {
        let l = deformations.local_mut().expect("zeros() carries a local field");
        fill_local(l, &times, n, local_fraction, params.local_amplitude, &anchors, &mut rng);
    }

    let ones = vec![1.0; n];
    let ground_truth = times
        .iter()
        .map(|t| render_anchors(&anchors, &deformations, &ones, LayerId::LOCAL, *t, params.width, params.height))
        .collect::<Result<Vec<_>>>()?;

    Ok(ToyScene { kind, anchors, deformations, width: params.width, height: params.height, ground_truth })
}

fn fill_global(g: &mut GlobalField, times: &[f64], moving: &[bool], drift: &dyn Fn(f64) -> [f64; 2]) {
    let n = moving.len();
    for (k, t) in times.iter().enumerate() {
        let d = drift(*t);
        let residual = 0.1 * (std::f64::consts::TAU * t).sin();
        for (i, _) in moving.iter().enumerate().filter(|(_, m)| **m) {
            let o = (k * n + i) * 2;
            g.displacements[o] = d[0];
            g.displacements[o + 1] = d[1];
            let f = (k * n + i) * FEATURE_DIM;
            g.feature_residuals[f..f + FEATURE_DIM].fill(residual);
        }
    }
}

fn fill_local(
    l: &mut LocalField,
    times: &[f64],
    n: usize,
    fraction: f64,
    amplitude: f64,
    anchors: &AnchorSet,
    rng: &mut Sequence,
) {
    for i in 0..n {
        if rng.uniform() >= fraction {
            continue;
        }
        let phase = rng.uniform();
        let freq = 1.0 + rng.below(2) as f64;
        let dir = rng.uniform() * std::f64::consts::TAU;
        let tint = [rng.range(-0.3, 0.3), rng.range(-0.3, 0.3), rng.range(-0.3, 0.3)];
        for (k, t) in times.iter().enumerate() {
            let w = std::f64::consts::TAU * (freq * t + phase);
            let j = k * n + i;
            let r = amplitude * w.sin();
            l.d_mu[j * 2] = r * dir.cos();
            l.d_mu[j * 2 + 1] = r * dir.sin();
            l.d_sigma[j] = 0.2 * anchors.scales()[i] * w.cos();
            l.d_alpha[j] = -0.3 * anchors.opacities()[i] * (0.5 + 0.5 * w.cos());
            l.d_color[j] = tint.map(|c| c * w.sin());
        }
    }
}

/// Loop settings for [`train_masks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    /// First step at which rate and TMC terms are active.
    pub progressive_start: usize,
    /// Central finite-difference step for the render-loss mask gradient.
    pub fd_step: f64,
    pub quant: QuantSteps,
    pub threshold: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 0.05,
            progressive_start: 1000,
            fd_step: 1e-3,
            quant: QuantSteps::default(),
            threshold: crate::asset::MASK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub level: u8,
    pub timestep: usize,
    pub render: f64,
    pub rate: f64,
    pub tmc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSample {
    pub step: usize,
    pub rho: f64,
    pub rho_ema: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scene_kind: SceneKind,
    pub anchor_count: usize,
    pub steps: usize,
    pub seed: u64,
    /// Mean PSNR over all timesteps with hard-thresholded masks, per level.
    pub psnr_db: [f64; 3],
    pub active_counts: [usize; 3],
    pub final_rho: f64,
    pub final_rho_ema: f64,
    pub final_pi: Distribution,
    pub level_draws: [usize; 3],
    pub rho_trajectory: Vec<RhoSample>,
    #[serde(skip)]
    pub loss_curve: Vec<LossRecord>,
}

impl TrainReport {
    /// Loss curve as CSV with a header row.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,level,timestep,render,rate,tmc,total\n");
        for r in &self.loss_curve {
            out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.9},{:.9}\n",
                r.step, r.level, r.timestep, r.render, r.rate, r.tmc, r.total
            ));
        }
        out
    }
}

/// Pre-routed splats for every (level, timestep) pair.
struct RoutedCache {
    splats: Vec<Vec<Splat>>,
    timesteps: usize,
}

impl RoutedCache {
    fn build(scene: &ToyScene) -> Result<Self> {
        let times = scene.deformations.timesteps();
        let mut splats = Vec::with_capacity(3 * times.len());
        for level in LayerId::ALL {
            for t in times {
                splats.push(ungated_splats(&route_level(&scene.anchors, &scene.deformations, level, *t)?)?);
            }
        }
        Ok(Self { splats, timesteps: times.len() })
    }

    fn get(&self, level: LayerId, k: usize) -> &[Splat] {
        &self.splats[level.index() * self.timesteps + k]
    }
}

/// Render loss and its central finite-difference mask gradient.
///
/// Each perturbed loss is evaluated exactly from the unperturbed accumulation
/// buffer by swapping one splat's contribution inside its support box.
fn render_loss_and_grad(splats: &[Splat], mask: &[f64], gt: &Image, h: f64) -> (f64, Vec<f64>) {
    let (w, ht) = (gt.width, gt.height);
    let acc = render_splats(splats, mask, w, ht);
    let n = acc.len() as f64;
    let base: f64 = acc.iter().zip(&gt.data).map(|(a, g)| (a.clamp(0.0, 1.0) - g).abs()).sum();

    let mut grad = vec![0.0; mask.len()];
    let mut fx = [Vec::new(), Vec::new(), Vec::new()];
    let mut fy = [Vec::new(), Vec::new(), Vec::new()];
    for (i, s) in splats.iter().enumerate() {
        let m = mask[i];
        let trial = [m, m + h, m - h];
        let widest = trial.iter().map(|v| (s.sigma * v).abs()).fold(0.0, f64::max);
        if widest == 0.0 || s.alpha == 0.0 {
            continue;
        }
        let r = SUPPORT_SIGMAS * widest;
        let x0 = (((s.cx - r) * w as f64 - 0.5).floor().max(0.0)) as usize;
        let x1 = ((((s.cx + r) * w as f64 - 0.5).ceil() + 1.0).max(0.0) as usize).min(w);
        let y0 = (((s.cy - r) * ht as f64 - 0.5).floor().max(0.0)) as usize;
        let y1 = ((((s.cy + r) * ht as f64 - 0.5).ceil() + 1.0).max(0.0) as usize).min(ht);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for (k, v) in trial.iter().enumerate() {
            let sigma = (s.sigma * v).abs();
            fx[k].clear();
            fy[k].clear();
            if sigma == 0.0 {
                fx[k].resize(x1 - x0, 0.0);
                fy[k].resize(y1 - y0, 0.0);
                continue;
            }
            let inv = 1.0 / (2.0 * sigma * sigma);
            fx[k].extend((x0..x1).map(|x| {
                let d = (x as f64 + 0.5) / w as f64 - s.cx;
                (-d * d * inv).exp()
            }));
            fy[k].extend((y0..y1).map(|y| {
                let d = (y as f64 + 0.5) / ht as f64 - s.cy;
                (-d * d * inv).exp()
            }));
        }
        let amp = [s.alpha * m, s.alpha * (m + h), s.alpha * (m - h)];
        let mut delta_plus = 0.0;
        let mut delta_minus = 0.0;
        for y in y0..y1 {
            let gy = [fy[0][y - y0], fy[1][y - y0], fy[2][y - y0]];
            for x in x0..x1 {
                let gx = [fx[0][x - x0], fx[1][x - x0], fx[2][x - x0]];
                let cur = amp[0] * gx[0] * gy[0];
                let plus = amp[1] * gx[1] * gy[1];
                let minus = amp[2] * gx[2] * gy[2];
                let o = (y * w + x) * 3;
                for c in 0..3 {
                    let a = acc[o + c];
                    let g = gt.data[o + c];
                    let col = s.color[c];
                    let before = (a.clamp(0.0, 1.0) - g).abs();
                    let rest = a - cur * col;
                    delta_plus += ((rest + plus * col).clamp(0.0, 1.0) - g).abs() - before;
                    delta_minus += ((rest + minus * col).clamp(0.0, 1.0) - g).abs() - before;
                }
            }
        }
        grad[i] = (delta_plus - delta_minus) / (2.0 * h * n);
    }
    (base / n, grad)
}

/// Mean PSNR over the scene's timesteps for every level.
pub fn evaluate_psnr(scene: &ToyScene, bank: &MaskBank) -> Result<[f64; 3]> {
    let hard = bank.hard_thresholded();
    let mut out = [0.0; 3];
    for level in LayerId::ALL {
        let mut sum = 0.0;
        for (t, gt) in scene.deformations.timesteps().iter().zip(&scene.ground_truth) {
            sum += psnr(&render(scene, &hard, level, *t)?, gt)?;
        }
        out[level.index()] = sum / scene.ground_truth.len() as f64;
    }
    Ok(out)
}

/// Trains the three mask levels with capacity-weighted level sampling.
pub fn train_masks(
    scene: &ToyScene,
    weights: &LossWeights,
    rollout: &RolloutConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(MaskBank, TrainReport)> {
    weights.validate()?;
    if !(settings.learning_rate > 0.0) || !(settings.fd_step > 0.0) {
        return Err(Error::Domain("learning rate and finite-difference step must be positive".into()));
    }
    let n = scene.anchors.len();
    let mut bank = MaskBank::new(std::array::from_fn(|_| vec![1.0; n]), settings.threshold)?;
    let cache = RoutedCache::build(scene)?;
    let mut scheduler = Scheduler::new(*rollout, CounterRng::new(seed, streams::ROLLOUT))?;
    let time_rng = CounterRng::new(seed, streams::TIMESTEP);
    let pair_rng = CounterRng::new(seed, streams::PAIRS);
    let pair_count = weights.pair_count(n);

    let mut curve = Vec::with_capacity(settings.steps);
    let mut trajectory = Vec::new();
    let mut draws = [0usize; 3];

    for step in 0..settings.steps {
        scheduler.set_step(step);
        if scheduler.is_sample_step(step) {
            let rho = activation_rate(&bank);
            scheduler.observe(rho);
            trajectory.push(RhoSample { step, rho, rho_ema: scheduler.state().rho_ema });
        }
        let level = scheduler.sample()?;
        draws[level.index()] += 1;
        let k = time_rng.below_at(step as u64, cache.timesteps as u64) as usize;
        let mask = bank.level(level).to_vec();
        let (render_loss, mut grad) =
            render_loss_and_grad(cache.get(level, k), &mask, &scene.ground_truth[k], settings.fd_step);

        let (mut rate, mut tmc, mut total) = (0.0, 0.0, render_loss);
        if step >= settings.progressive_start {
            let mut active = bank.active(level);
            if active.len() < 2 {
                active = (0..n).collect();
            }
            let priors = estimate_priors(&scene.anchors, &active, &settings.quant)?;
            let costs = anchor_bit_costs(&scene.anchors, &priors);
            let pairs = sample_pairs_from(n, pair_count, pair_rng.fork(step as u64))?;
            let terms = LevelTerms {
                anchor_costs: &costs,
                positions: scene.anchors.positions(),
                dim: 2,
                pairs: &pairs,
            };
            let reg = level_loss_for_mask(render_loss, &mask, level, weights, &terms)?;
            for (g, r) in grad.iter_mut().zip(&reg.grad) {
                *g += r;
            }
            rate = reg.rate;
            tmc = reg.tmc;
            total = reg.total;
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure { step, reason: "non-finite loss or gradient".into() });
        }
        let updated: Vec<f64> = mask.iter().zip(&grad).map(|(m, g)| m - settings.learning_rate * g).collect();
        bank.set_level(level, &updated)?;
        curve.push(LossRecord { step, level: level.value(), timestep: k, render: render_loss, rate, tmc, total });
    }
    scheduler.set_step(settings.steps);

    let report = TrainReport {
        scene_kind: scene.kind,
        anchor_count: n,
        steps: settings.steps,
        seed,
        psnr_db: evaluate_psnr(scene, &bank)?,
        active_counts: LayerId::ALL.map(|l| bank.active(l).len()),
        final_rho: activation_rate(&bank),
        final_rho_ema: scheduler.state().rho_ema,
        final_pi: scheduler.pi(),
        level_draws: draws,
        rho_trajectory: trajectory,
        loss_curve: curve,
    };
    Ok((bank, report))
}

/// Fraction of masks (all levels) within `tol` of 0 or 1.
pub fn binarized_fraction(bank: &MaskBank, tol: f64) -> f64 {
    let all: Vec<f64> = LayerId::ALL.iter().flat_map(|l| bank.level(*l).iter().copied()).collect();
    if all.is_empty() {
        return 1.0;
    }
    all.iter().filter(|m| **m <= tol || **m >= 1.0 - tol).count() as f64 / all.len() as f64
}
