//! Anchors, per-level masks, tabulated deformation fields and level routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default inference threshold for hard mask pruning.
pub const MASK_THRESHOLD: f64 = 0.01;

/// Smallest scale a local residual may drive a Gaussian to.
pub const MIN_SCALE: f64 = 1e-6;

/// Bitstream layer / rendering level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LayerId(u8);

impl LayerId {
    pub const STATIC: LayerId = LayerId(0);
    pub const GLOBAL: LayerId = LayerId(1);
    pub const LOCAL: LayerId = LayerId(2);
    pub const ALL: [LayerId; 3] = [Self::STATIC, Self::GLOBAL, Self::LOCAL];

    pub fn new(value: u8) -> Result<Self> {
        if value <= 2 {
            Ok(LayerId(value))
        } else {
            Err(Error::Domain(format!("layer id {value} outside {{0,1,2}}")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "static scaffold",
            1 => "global deformation",
            _ => "local refinement",
        }
    }
}

impl TryFrom<u8> for LayerId {
    type Error = Error;
    fn try_from(value: u8) -> Result<Self> {
        LayerId::new(value)
    }
}

impl From<LayerId> for u8 {
    fn from(id: LayerId) -> u8 {
        id.0
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Canonical anchor set shared by every layer.
///
/// Vector-valued attributes are stored row-major: anchor `i` owns
/// `positions[i*dim..(i+1)*dim]`, and likewise for features and offsets.
/// A rendered Gaussian sits at `position + scale * offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    dim: usize,
    feature_dim: usize,
    positions: Vec<f64>,
    features: Vec<f64>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

impl AnchorSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        feature_dim: usize,
        positions: Vec<f64>,
        features: Vec<f64>,
        scales: Vec<f64>,
        offsets: Vec<f64>,
        opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let set = Self::from_parts(
            dim,
            feature_dim,
            positions,
            features,
            scales,
            offsets,
            opacities,
            colors,
        )?;
        if set.is_empty() {
            return Err(Error::Dimension("anchor set must hold at least one anchor".into()));
        }
        if let Some(s) = set.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("scale {s} is not strictly positive")));
        }
        if let Some(a) = set.opacities.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Domain(format!("opacity {a} outside [0,1]")));
        }
        if set.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain("color channel outside [0,1]".into()));
        }
        Ok(set)
    }

    /// Shape-checked construction without value invariants. Used for gated
    /// and decoded sets, where zero scales and empty sets are legitimate.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        dim: usize,
        feature_dim: usize,
        positions: Vec<f64>,
        features: Vec<f64>,
        scales: Vec<f64>,
        offsets: Vec<f64>,
        opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Dimension(format!("spatial dimension {dim} not in {{2,3}}")));
        }
        let n = scales.len();
        let check = |name: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{name} has length {len}, expected {want}")))
            }
        };
        check("positions", positions.len(), n * dim)?;
        check("features", features.len(), n * feature_dim)?;
        check("offsets", offsets.len(), n * dim)?;
        check("opacities", opacities.len(), n)?;
        check("colors", colors.len(), n)?;
        Ok(Self {
            dim,
            feature_dim,
            positions,
            features,
            scales,
            offsets,
            opacities,
            colors,
        })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn offset(&self, i: usize) -> &[f64] {
        &self.offsets[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn opacities(&self) -> &[f64] {
        &self.opacities
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Center of the Gaussian spawned by anchor `i`.
    pub fn center(&self, i: usize) -> Vec<f64> {
        self.position(i)
            .iter()
            .zip(self.offset(i))
            .map(|(x, o)| x + self.scales[i] * o)
            .collect()
    }

    /// Sub-set of anchors by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> AnchorSet {
        let mut out = AnchorSet {
            dim: self.dim,
            feature_dim: self.feature_dim,
            positions: Vec::with_capacity(indices.len() * self.dim),
            features: Vec::with_capacity(indices.len() * self.feature_dim),
            scales: Vec::with_capacity(indices.len()),
            offsets: Vec::with_capacity(indices.len() * self.dim),
            opacities: Vec::with_capacity(indices.len()),
            colors: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.positions.extend_from_slice(self.position(i));
            out.features.extend_from_slice(self.feature(i));
            out.scales.push(self.scales[i]);
            out.offsets.extend_from_slice(self.offset(i));
            out.opacities.push(self.opacities[i]);
            out.colors.push(self.colors[i]);
        }
        out
    }
}

/// Learnable per-level anchor masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBank {
    levels: [Vec<f64>; 3],
    threshold: f64,
}

impl MaskBank {
    pub fn new(levels: [Vec<f64>; 3], threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Domain(format!("mask threshold {threshold} outside (0,1)")));
        }
        let n = levels[0].len();
        if levels.iter().any(|l| l.len() != n) {
            return Err(Error::Dimension("mask levels differ in length".into()));
        }
        if levels.iter().flatten().any(|m| m.is_nan()) {
            return Err(Error::Domain("mask value is NaN".into()));
        }
        let levels = levels.map(|l| l.into_iter().map(|m| m.clamp(0.0, 1.0)).collect());
        Ok(Self { levels, threshold })
    }

    /// All masks fully on, the initialization used for training.
    pub fn ones(anchor_count: usize) -> Self {
        Self {
            levels: std::array::from_fn(|_| vec![1.0; anchor_count]),
            threshold: MASK_THRESHOLD,
        }
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn level(&self, level: LayerId) -> &[f64] {
        &self.levels[level.index()]
    }

    /// Replaces one level, clamping into `[0,1]`.
    pub fn set_level(&mut self, level: LayerId, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, bank holds {}",
                values.len(),
                self.len()
            )));
        }
        for (dst, src) in self.levels[level.index()].iter_mut().zip(values) {
            *dst = src.clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Inference-time masks: entries at or below the threshold become 0.
    pub fn hard_thresholded(&self) -> MaskBank {
        let t = self.threshold;
        MaskBank {
            levels: self
                .levels
                .clone()
                .map(|l| l.into_iter().map(|m| if m > t { m } else { 0.0 }).collect()),
            threshold: t,
        }
    }

    pub fn active(&self, level: LayerId) -> Vec<usize> {
        active_set(self.level(level), self.threshold)
    }
}

/// Per-anchor displacements and feature residuals over the timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalField {
    /// `T × |V| × dim`
    pub displacements: Vec<f64>,
    /// `T × |V| × feature_dim`
    pub feature_residuals: Vec<f64>,
}

/// Per-Gaussian residuals over the timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalField {
    /// `T × |V| × dim`
    pub d_mu: Vec<f64>,
    /// `T × |V|`
    pub d_sigma: Vec<f64>,
    /// `T × |V|`
    pub d_alpha: Vec<f64>,
    /// `T × |V|`
    pub d_color: Vec<[f64; 3]>,
}

/// Tabulated stand-in for the global and local deformation networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationTable {
    anchor_count: usize,
    dim: usize,
    feature_dim: usize,
    timesteps: Vec<f64>,
    global: Option<GlobalField>,
    local: Option<LocalField>,
}

impl DeformationTable {
    pub fn new(
        anchor_count: usize,
        dim: usize,
        feature_dim: usize,
        timesteps: Vec<f64>,
        global: Option<GlobalField>,
        local: Option<LocalField>,
    ) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Dimension("deformation table needs at least one timestep".into()));
        }
        if timesteps.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain("timestep outside [0,1]".into()));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("timesteps must be strictly increasing".into()));
        }
        let t = timesteps.len();
        let n = anchor_count;
        let check = |name: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{name} has length {len}, expected {want}")))
            }
        };
        if let Some(g) = &global {
            check("global displacements", g.displacements.len(), t * n * dim)?;
            check("global feature residuals", g.feature_residuals.len(), t * n * feature_dim)?;
        }
        if let Some(l) = &local {
            check("local d_mu", l.d_mu.len(), t * n * dim)?;
            check("local d_sigma", l.d_sigma.len(), t * n)?;
            check("local d_alpha", l.d_alpha.len(), t * n)?;
            check("local d_color", l.d_color.len(), t * n)?;
        }
        Ok(Self {
            anchor_count,
            dim,
            feature_dim,
            timesteps,
            global,
            local,
        })
    }

    /// Table with both layers present and every entry zero.
    pub fn zeros(anchor_count: usize, dim: usize, feature_dim: usize, timesteps: Vec<f64>) -> Result<Self> {
        let t = timesteps.len();
        let n = anchor_count;
        Self::new(
            n,
            dim,
            feature_dim,
            timesteps,
            Some(GlobalField {
                displacements: vec![0.0; t * n * dim],
                feature_residuals: vec![0.0; t * n * feature_dim],
            }),
            Some(LocalField {
                d_mu: vec![0.0; t * n * dim],
                d_sigma: vec![0.0; t * n],
                d_alpha: vec![0.0; t * n],
                d_color: vec![[0.0; 3]; t * n],
            }),
        )
    }

    /// Table with no deformation layers, as decoded from a base-only prefix.
    pub fn empty(anchor_count: usize, dim: usize, feature_dim: usize) -> Self {
        Self {
            anchor_count,
            dim,
            feature_dim,
            timesteps: vec![0.0],
            global: None,
            local: None,
        }
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn global(&self) -> Option<&GlobalField> {
        self.global.as_ref()
    }

    pub fn local(&self) -> Option<&LocalField> {
        self.local.as_ref()
    }

    pub fn global_mut(&mut self) -> Option<&mut GlobalField> {
        self.global.as_mut()
    }

    pub fn local_mut(&mut self) -> Option<&mut LocalField> {
        self.local.as_mut()
    }

    /// Index of the stored timestep nearest to `t`; ties resolve downward.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (k, ts) in self.timesteps.iter().enumerate() {
            if (ts - t).abs() < (self.timesteps[best] - t).abs() {
                best = k;
            }
        }
        best
    }

    /// Whether every stored deformation entry is exactly zero.
    pub fn is_all_zero(&self) -> bool {
        let g = self.global.as_ref().is_none_or(|g| {
            g.displacements.iter().chain(&g.feature_residuals).all(|v| *v == 0.0)
        });
        let l = self.local.as_ref().is_none_or(|l| {
            l.d_mu.iter().chain(&l.d_sigma).chain(&l.d_alpha).all(|v| *v == 0.0)
                && l.d_color.iter().flatten().all(|v| *v == 0.0)
        });
        g && l
    }
}

/// Scales opacity and scale of every anchor by its mask value.
pub fn gate_attributes(anchors: &AnchorSet, mask: &[f64]) -> Result<AnchorSet> {
    if mask.len() != anchors.len() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} anchors",
            mask.len(),
            anchors.len()
        )));
    }
    Ok(gate_unchecked(anchors, mask))
}

pub(crate) fn gate_unchecked(anchors: &AnchorSet, mask: &[f64]) -> AnchorSet {
    let mut out = anchors.clone();
    for ((a, s), m) in out.opacities.iter_mut().zip(out.scales.iter_mut()).zip(mask) {
        *a *= m;
        *s *= m;
    }
    out
}

/// Indices whose mask strictly exceeds `threshold`, ascending.
pub fn active_set(mask: &[f64], threshold: f64) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, m)| **m > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Mean per-anchor gap between the top-level and base-level masks, in `[0,1]`.
pub fn activation_rate(bank: &MaskBank) -> f64 {
    if bank.is_empty() {
        return 0.0;
    }
    let top = bank.level(LayerId::LOCAL);
    let base = bank.level(LayerId::STATIC);
    let sum: f64 = top.iter().zip(base).map(|(t, b)| t - b).sum();
    (sum / bank.len() as f64).clamp(0.0, 1.0)
}

/// Canonical anchors after applying the deformation layers up to `level`
/// at the stored timestep nearest `t`.
pub fn route_level(
    anchors: &AnchorSet,
    deformations: &DeformationTable,
    level: LayerId,
    t: f64,
) -> Result<AnchorSet> {
    let mut out = anchors.clone();
    if level == LayerId::STATIC {
        return Ok(out);
    }
    let n = anchors.len();
    if deformations.anchor_count != n || deformations.dim != anchors.dim {
        return Err(Error::Dimension(format!(
            "deformation table covers {} anchors in {}D, anchor set has {} in {}D",
            deformations.anchor_count, deformations.dim, n, anchors.dim
        )));
    }
    let k = deformations.nearest_index(t);
    let dim = anchors.dim;
    let fdim = anchors.feature_dim;

    let global = deformations.global.as_ref().ok_or(Error::MissingLayer(1))?;
    if deformations.feature_dim != fdim {
        return Err(Error::Dimension("feature residual width differs from anchor features".into()));
    }
    let disp = &global.displacements[k * n * dim..(k + 1) * n * dim];
    for (p, d) in out.positions.iter_mut().zip(disp) {
        *p += d;
    }
    let fres = &global.feature_residuals[k * n * fdim..(k + 1) * n * fdim];
    for (f, d) in out.features.iter_mut().zip(fres) {
        *f += d;
    }
    if level == LayerId::GLOBAL {
        return Ok(out);
    }

    let local = deformations.local.as_ref().ok_or(Error::MissingLayer(2))?;
    let d_mu = &local.d_mu[k * n * dim..(k + 1) * n * dim];
    for (p, d) in out.positions.iter_mut().zip(d_mu) {
        *p += d;
    }
    for i in 0..n {
        let j = k * n + i;
        out.scales[i] = (out.scales[i] + local.d_sigma[j]).max(MIN_SCALE);
        out.opacities[i] = (out.opacities[i] + local.d_alpha[j]).clamp(0.0, 1.0);
        for c in 0..3 {
            out.colors[i][c] = (out.colors[i][c] + local.d_color[j][c]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(alpha: f64, scale: f64) -> AnchorSet {
        AnchorSet::new(
            2,
            1,
            vec![0.5, 0.5],
            vec![0.3],
            vec![scale],
            vec![0.1, -0.1],
            vec![alpha],
            vec![[0.2, 0.4, 0.6]],
        )
        .unwrap()
    }

    fn grid(n: usize) -> AnchorSet {
        let positions = (0..n).flat_map(|i| [i as f64 / n as f64, 0.5]).collect();
        AnchorSet::new(
            2,
            2,
            positions,
            (0..2 * n).map(|i| i as f64 * 0.1).collect(),
            vec![0.05; n],
            vec![0.0; 2 * n],
            (0..n).map(|i| 0.2 + 0.6 * i as f64 / n as f64).collect(),
            vec![[0.5, 0.5, 0.5]; n],
        )
        .unwrap()
    }

    #[test]
    fn gate_identity_and_annihilation() {
        let a = grid(5);
        assert_eq!(gate_attributes(&a, &[1.0; 5]).unwrap(), a);
        let z = gate_attributes(&a, &[0.0; 5]).unwrap();
        assert!(z.opacities().iter().all(|v| *v == 0.0));
        assert!(z.scales().iter().all(|v| *v == 0.0));
        assert_eq!(z.positions(), a.positions());
        assert_eq!(z.colors(), a.colors());
    }

    #[test]
    fn gate_single_anchor() {
        let g = gate_attributes(&single(0.8, 2.0), &[0.5]).unwrap();
        assert_eq!(g.opacities(), &[0.4]);
        assert_eq!(g.scales(), &[1.0]);
    }

    #[test]
    fn gate_rejects_length_mismatch() {
        assert!(matches!(gate_attributes(&grid(3), &[1.0; 2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn active_set_examples() {
        assert_eq!(active_set(&[0.005, 0.011, 1.0], 0.01), vec![1, 2]);
        assert!(active_set(&[0.0; 4], 0.01).is_empty());
        assert_eq!(active_set(&[1.0; 3], 0.01), vec![0, 1, 2]);
    }

    #[test]
    fn activation_rate_examples() {
        let b = MaskBank::new([vec![0.0; 3], vec![0.5; 3], vec![1.0; 3]], 0.01).unwrap();
        assert_eq!(activation_rate(&b), 1.0);
        let b = MaskBank::new([vec![0.3; 3], vec![0.5; 3], vec![0.3; 3]], 0.01).unwrap();
        assert_eq!(activation_rate(&b), 0.0);
        let b = MaskBank::new(
            [vec![0.5; 4], vec![0.0; 4], vec![1.0, 1.0, 0.5, 0.5]],
            0.01,
        )
        .unwrap();
        assert!((activation_rate(&b) - 0.25).abs() < 1e-15);
        // negative mean gap clamps to zero
        let b = MaskBank::new([vec![1.0; 2], vec![1.0; 2], vec![0.0; 2]], 0.01).unwrap();
        assert_eq!(activation_rate(&b), 0.0);
    }

    #[test]
    fn mask_bank_clamps_and_validates() {
        let b = MaskBank::new([vec![-0.5], vec![1.5], vec![0.5]], 0.01).unwrap();
        assert_eq!(b.level(LayerId::STATIC), &[0.0]);
        assert_eq!(b.level(LayerId::GLOBAL), &[1.0]);
        assert!(MaskBank::new([vec![0.5], vec![0.5], vec![0.5]], 1.0).is_err());
        assert!(MaskBank::new([vec![0.5], vec![0.5, 0.1], vec![0.5]], 0.01).is_err());
    }

    #[test]
    fn anchor_invariants_enforced() {
        assert!(AnchorSet::new(2, 0, vec![0.0, 0.0], vec![], vec![0.0], vec![0.0, 0.0], vec![0.5], vec![[0.0; 3]]).is_err());
        assert!(AnchorSet::new(2, 0, vec![0.0, 0.0], vec![], vec![1.0], vec![0.0, 0.0], vec![1.5], vec![[0.0; 3]]).is_err());
        assert!(AnchorSet::new(2, 0, vec![], vec![], vec![], vec![], vec![], vec![]).is_err());
        assert!(AnchorSet::new(4, 0, vec![0.0; 4], vec![], vec![1.0], vec![0.0; 4], vec![0.5], vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn deformation_table_validates_timesteps() {
        assert!(DeformationTable::zeros(2, 2, 1, vec![]).is_err());
        assert!(DeformationTable::zeros(2, 2, 1, vec![0.5, 0.5]).is_err());
        assert!(DeformationTable::zeros(2, 2, 1, vec![0.0, 1.5]).is_err());
        let t = DeformationTable::zeros(2, 2, 1, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(t.nearest_index(0.24), 0);
        assert_eq!(t.nearest_index(0.25), 0);
        assert_eq!(t.nearest_index(0.26), 1);
        assert_eq!(t.nearest_index(1.0), 2);
    }

    #[test]
    fn route_level_static_and_zero_tables() {
        let a = grid(4);
        let zero = DeformationTable::zeros(4, 2, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(route_level(&a, &zero, LayerId::STATIC, 0.7).unwrap(), a);
        assert_eq!(route_level(&a, &zero, LayerId::GLOBAL, 0.7).unwrap(), a);
        assert_eq!(route_level(&a, &zero, LayerId::LOCAL, 0.7).unwrap(), a);
        let empty = DeformationTable::empty(4, 2, 2);
        assert_eq!(route_level(&a, &empty, LayerId::STATIC, 0.0).unwrap(), a);
        assert_eq!(route_level(&a, &empty, LayerId::GLOBAL, 0.0), Err(Error::MissingLayer(1)));
    }

    #[test]
    fn route_level_local_alpha_cancels_opacity() {
        let a = grid(4);
        let mut table = DeformationTable::zeros(4, 2, 2, vec![0.0]).unwrap();
        let local = table.local_mut().unwrap();
        for (d, alpha) in local.d_alpha.iter_mut().zip(a.opacities()) {
            *d = -alpha;
        }
        let routed = route_level(&a, &table, LayerId::LOCAL, 0.0).unwrap();
        assert!(routed.opacities().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn route_level_applies_global_then_local() {
        let a = single(0.5, 0.1);
        let mut table = DeformationTable::zeros(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let g = table.global_mut().unwrap();
        g.displacements[2..4].copy_from_slice(&[0.1, -0.2]);
        g.feature_residuals[1] = 0.5;
        let l = table.local_mut().unwrap();
        l.d_mu[2..4].copy_from_slice(&[0.01, 0.01]);
        l.d_sigma[1] = -1.0;
        l.d_alpha[1] = 0.7;
        l.d_color[1] = [1.0, -1.0, 0.1];

        let r1 = route_level(&a, &table, LayerId::GLOBAL, 0.9).unwrap();
        assert!((r1.position(0)[0] - 0.6).abs() < 1e-15);
        assert!((r1.position(0)[1] - 0.3).abs() < 1e-15);
        assert_eq!(r1.feature(0), &[0.8]);
        assert_eq!(r1.opacities(), a.opacities());

        let r2 = route_level(&a, &table, LayerId::LOCAL, 0.9).unwrap();
        assert!((r2.position(0)[0] - 0.61).abs() < 1e-15);
        assert_eq!(r2.scales(), &[MIN_SCALE]);
        assert_eq!(r2.opacities(), &[1.0]);
        assert_eq!(r2.colors()[0][0], 1.0);
        assert_eq!(r2.colors()[0][1], 0.0);
        assert!((r2.colors()[0][2] - 0.7).abs() < 1e-15);

        // t = 0 picks the untouched first timestep
        assert_eq!(route_level(&a, &table, LayerId::LOCAL, 0.2).unwrap(), a);
    }

    proptest! {
        #[test]
        fn gate_composes_multiplicatively(
            m1 in proptest::collection::vec(0.0f64..=1.0, 6),
            m2 in proptest::collection::vec(0.0f64..=1.0, 6),
        ) {
            let a = grid(6);
            let twice = gate_attributes(&gate_attributes(&a, &m1).unwrap(), &m2).unwrap();
            let prod: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| x * y).collect();
            let once = gate_attributes(&a, &prod).unwrap();
            for i in 0..6 {
                prop_assert!((twice.opacities()[i] - once.opacities()[i]).abs() < 1e-12);
                prop_assert!((twice.scales()[i] - once.scales()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn active_set_monotone_in_threshold(
            mask in proptest::collection::vec(0.0f64..=1.0, 0..40),
            lo in 0.001f64..0.5,
            delta in 0.0f64..0.49,
        ) {
            let hi = lo + delta;
            let a = active_set(&mask, lo);
            let b = active_set(&mask, hi);
            prop_assert!(b.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn zeroed_higher_layer_collapses_to_lower(
            disp in proptest::collection::vec(-0.2f64..0.2, 8),
            t in 0.0f64..=1.0,
        ) {
            let a = grid(4);
            let mut table = DeformationTable::zeros(4, 2, 2, vec![0.0]).unwrap();
            table.global_mut().unwrap().displacements.copy_from_slice(&disp);
            let l1 = route_level(&a, &table, LayerId::GLOBAL, t).unwrap();
            let l2 = route_level(&a, &table, LayerId::LOCAL, t).unwrap();
            prop_assert_eq!(l1, l2);
        }
    }
}
