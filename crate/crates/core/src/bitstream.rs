//! Prefix-decodable layered container (`.pd4g`).
//!
//! ```text
//! header   magic "PD4G" | version u8 | preset u8 | spatial dim u8 |
//!          local scale width u8 | anchor count u32 | feature dim u16 |
//!          timestep count u16 | 9 × quant step f64 | chunk count u8
//! table    chunk count × (layer u8 | compressed len u32 | raw len u32 | crc32 u32)
//! payload  xz-compressed chunks, layer order 0, 1, 2
//! ```
//!
//! All integers are little-endian. The CRC covers the decompressed chunk.
//! See `FORMAT.md` for the chunk bodies.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::asset::{active_set, AnchorSet, DeformationTable, GlobalField, LayerId, LocalField, MaskBank};
use crate::entropy::{quantize, scale_attribute};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PD4G";
pub const VERSION: u8 = 1;
pub const DEFAULT_PRESET: u8 = 6;
/// Scalars per local scale residual; 1 = isotropic.
pub const LOCAL_SCALE_WIDTH: u8 = 1;

const QUANT_FAMILIES: usize = 9;
pub const FIXED_HEADER_LEN: usize = 16 + 8 * QUANT_FAMILIES + 1;
pub const CHUNK_ENTRY_LEN: usize = 13;

/// Quantization steps for every serialized attribute family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerQuant {
    pub position: f64,
    pub feature: f64,
    /// Applied to log-scales.
    pub scale: f64,
    pub offset: f64,
    pub opacity: f64,
    pub color: f64,
    pub displacement: f64,
    pub feature_residual: f64,
    pub local: f64,
}

impl Default for ContainerQuant {
    fn default() -> Self {
        Self {
            position: 1.0 / 4096.0,
            feature: 1.0 / 16.0,
            scale: 1.0 / 16.0,
            offset: 1.0 / 16.0,
            opacity: 1.0 / 255.0,
            color: 1.0 / 255.0,
            displacement: 1.0 / 1024.0,
            feature_residual: 1.0 / 64.0,
            local: 1.0 / 1024.0,
        }
    }
}

impl ContainerQuant {
    fn to_array(self) -> [f64; QUANT_FAMILIES] {
        [
            self.position,
            self.feature,
            self.scale,
            self.offset,
            self.opacity,
            self.color,
            self.displacement,
            self.feature_residual,
            self.local,
        ]
    }

    fn from_array(a: [f64; QUANT_FAMILIES]) -> Self {
        Self {
            position: a[0],
            feature: a[1],
            scale: a[2],
            offset: a[3],
            opacity: a[4],
            color: a[5],
            displacement: a[6],
            feature_residual: a[7],
            local: a[8],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(Error::Domain("quantization steps must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub quant: ContainerQuant,
    pub preset: u8,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self { quant: ContainerQuant::default(), preset: DEFAULT_PRESET }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub layer: u8,
    pub compressed_len: u32,
    pub raw_len: u32,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u8,
    pub preset: u8,
    pub spatial_dim: u8,
    pub local_scale_width: u8,
    pub anchor_count: u32,
    pub feature_dim: u16,
    pub timestep_count: u16,
    pub quant: ContainerQuant,
    pub chunks: Vec<ChunkEntry>,
}

impl Header {
    /// Header plus chunk table length in bytes.
    pub fn len(&self) -> usize {
        FIXED_HEADER_LEN + CHUNK_ENTRY_LEN * self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.preset);
        out.push(self.spatial_dim);
        out.push(self.local_scale_width);
        out.extend_from_slice(&self.anchor_count.to_le_bytes());
        out.extend_from_slice(&self.feature_dim.to_le_bytes());
        out.extend_from_slice(&self.timestep_count.to_le_bytes());
        for q in self.quant.to_array() {
            out.extend_from_slice(&q.to_le_bytes());
        }
        out.push(self.chunks.len() as u8);
        for c in &self.chunks {
            out.push(c.layer);
            out.extend_from_slice(&c.compressed_len.to_le_bytes());
            out.extend_from_slice(&c.raw_len.to_le_bytes());
            out.extend_from_slice(&c.crc32.to_le_bytes());
        }
    }

    /// Parses header and chunk table; does not touch the payload.
    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::InsufficientData("container shorter than its magic".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a PD4G container".into()));
        }
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(Error::InsufficientData(format!(
                "header needs {FIXED_HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let mut r = Cursor::new(&bytes[4..]);
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let preset = r.u8()?;
        let spatial_dim = r.u8()?;
        if !(2..=3).contains(&spatial_dim) {
            return Err(Error::Format(format!("spatial dimension {spatial_dim}")));
        }
        let local_scale_width = r.u8()?;
        if local_scale_width != LOCAL_SCALE_WIDTH {
            return Err(Error::Format(format!("unsupported local scale width {local_scale_width}")));
        }
        let anchor_count = r.u32()?;
        let feature_dim = r.u16()?;
        let timestep_count = r.u16()?;
        let mut q = [0.0; QUANT_FAMILIES];
        for v in &mut q {
            *v = r.f64()?;
        }
        let quant = ContainerQuant::from_array(q);
        quant.validate().map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u8()? as usize;
        if count == 0 || count > 3 {
            return Err(Error::Format(format!("chunk count {count} outside 1..=3")));
        }
        let table_end = FIXED_HEADER_LEN + count * CHUNK_ENTRY_LEN;
        if bytes.len() < table_end {
            return Err(Error::InsufficientData("truncated chunk table".into()));
        }
        let mut chunks = Vec::with_capacity(count);
        for k in 0..count {
            let entry = ChunkEntry {
                layer: r.u8()?,
                compressed_len: r.u32()?,
                raw_len: r.u32()?,
                crc32: r.u32()?,
            };
            if entry.layer as usize != k {
                return Err(Error::Format(format!("chunk {k} carries layer id {}", entry.layer)));
            }
            if entry.compressed_len == 0 {
                return Err(Error::Format(format!("chunk {k} is empty")));
            }
            chunks.push(entry);
        }
        Ok(Header {
            version,
            preset,
            spatial_dim,
            local_scale_width,
            anchor_count,
            feature_dim,
            timestep_count,
            quant,
            chunks,
        })
    }
}

/// Per-layer sizes computed from the chunk table alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub header_bytes: u64,
    pub layer_bytes: Vec<u64>,
    pub raw_bytes: Vec<u64>,
    /// `S_ℓ`: bytes needed to render level ℓ, header included.
    pub cumulative_bytes: Vec<u64>,
    pub checksums: Vec<u32>,
}

impl LayerManifest {
    /// Builds a manifest directly from cumulative sizes, e.g. for latency studies.
    pub fn from_cumulative(cumulative_bytes: Vec<u64>) -> Result<Self> {
        if cumulative_bytes.is_empty() || cumulative_bytes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("cumulative sizes must be non-empty and strictly increasing".into()));
        }
        let mut layer_bytes = Vec::with_capacity(cumulative_bytes.len());
        let mut prev = 0;
        for c in &cumulative_bytes {
            layer_bytes.push(c - prev);
            prev = *c;
        }
        Ok(Self {
            header_bytes: 0,
            raw_bytes: vec![0; layer_bytes.len()],
            checksums: vec![0; layer_bytes.len()],
            layer_bytes,
            cumulative_bytes,
        })
    }

    pub fn total_bytes(&self) -> u64 {
        *self.cumulative_bytes.last().unwrap_or(&self.header_bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn manifest(bytes: &[u8]) -> Result<LayerManifest> {
    let header = Header::parse(bytes)?;
    let h = header.len() as u64;
    let mut cumulative = Vec::with_capacity(header.chunks.len());
    let mut acc = h;
    for c in &header.chunks {
        acc += c.compressed_len as u64;
        cumulative.push(acc);
    }
    Ok(LayerManifest {
        header_bytes: h,
        layer_bytes: header.chunks.iter().map(|c| c.compressed_len as u64).collect(),
        raw_bytes: header.chunks.iter().map(|c| c.raw_len as u64).collect(),
        cumulative_bytes: cumulative,
        checksums: header.chunks.iter().map(|c| c.crc32).collect(),
    })
}

/// Everything recoverable from a received prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedModel {
    pub header: Header,
    pub max_level: LayerId,
    /// Source anchor index of every decoded anchor.
    pub anchor_ids: Vec<u32>,
    pub anchors: AnchorSet,
    /// Per-level membership over the decoded anchors: 1 where the level
    /// keeps the anchor, 0 elsewhere.
    pub masks: MaskBank,
    pub deformations: DeformationTable,
}

/// Serializes the active anchors and deformation layers into a container.
pub fn encode(
    anchors: &AnchorSet,
    bank: &MaskBank,
    deformations: &DeformationTable,
    config: &EncodeConfig,
) -> Result<Vec<u8>> {
    config.quant.validate()?;
    let n = anchors.len();
    if bank.len() != n || deformations.anchor_count() != n {
        return Err(Error::Dimension(format!(
            "anchors {n}, masks {}, deformation table {}",
            bank.len(),
            deformations.anchor_count()
        )));
    }
    if deformations.dim() != anchors.dim() || deformations.feature_dim() != anchors.feature_dim() {
        return Err(Error::Dimension("deformation table shape differs from anchors".into()));
    }
    let global = deformations.global().ok_or(Error::MissingLayer(1))?;
    let local = deformations.local().ok_or(Error::MissingLayer(2))?;
    if config.preset > 9 {
        return Err(Error::Domain(format!("compressor preset {} outside 0..=9", config.preset)));
    }

    let threshold = bank.threshold();
    let sets: [Vec<usize>; 3] = LayerId::ALL.map(|l| active_set(bank.level(l), threshold));
    if sets[0].is_empty() {
        return Err(Error::EmptyBaseLayer);
    }
    let q = &config.quant;
    let t = deformations.timesteps().len();

    // decoded ordering: level-0 anchors, then supplements of level 1, then level 2
    let mut order: Vec<usize> = sets[0].clone();
    let mut raw = Vec::with_capacity(3);

    let mut w = Writer::default();
    w.u32(sets[0].len() as u32);
    w.ids(&sets[0]);
    w.ints(&anchor_indices(anchors, &sets[0], q)?);
    raw.push(w.finish());

    for level in [LayerId::GLOBAL, LayerId::LOCAL] {
        let set = &sets[level.index()];
        let mut w = Writer::default();
        if level == LayerId::GLOBAL {
            w.u32(t as u32);
            for ts in deformations.timesteps() {
                w.f64(*ts);
            }
        }
        let position_of = |i: usize| order.iter().position(|o| *o == i);
        let refs: Vec<usize> = set.iter().filter_map(|&i| position_of(i)).collect();
        let supplements: Vec<usize> = set.iter().copied().filter(|&i| position_of(i).is_none()).collect();
        w.u32(refs.len() as u32);
        w.ids(&refs);
        w.u32(supplements.len() as u32);
        w.ids(&supplements);
        order.extend_from_slice(&supplements);

        // chunk-local ordering: referenced anchors first, then supplements
        let members: Vec<usize> = refs.iter().map(|r| order[*r]).chain(supplements.iter().copied()).collect();
        let mut ints = anchor_indices(anchors, &supplements, q)?;
        let nn = n;
        for k in 0..t {
            if level == LayerId::GLOBAL {
                let d = anchors.dim();
                let f = anchors.feature_dim();
                ints.extend(quantize_all(
                    members.iter().flat_map(|&i| global.displacements[(k * nn + i) * d..(k * nn + i + 1) * d].iter().copied()),
                    q.displacement,
                )?);
                ints.extend(quantize_all(
                    members.iter().flat_map(|&i| global.feature_residuals[(k * nn + i) * f..(k * nn + i + 1) * f].iter().copied()),
                    q.feature_residual,
                )?);
            } else {
                let d = anchors.dim();
                ints.extend(quantize_all(
                    members.iter().flat_map(|&i| local.d_mu[(k * nn + i) * d..(k * nn + i + 1) * d].iter().copied()),
                    q.local,
                )?);
                ints.extend(quantize_all(members.iter().map(|&i| local.d_sigma[k * nn + i]), q.local)?);
                ints.extend(quantize_all(members.iter().map(|&i| local.d_alpha[k * nn + i]), q.local)?);
                ints.extend(quantize_all(members.iter().flat_map(|&i| local.d_color[k * nn + i]), q.local)?);
            }
        }
        w.ints(&ints);
        raw.push(w.finish());
    }

    let mut chunks = Vec::with_capacity(3);
    let mut payload = Vec::new();
    for (k, body) in raw.iter().enumerate() {
        let packed = compress(body, config.preset)?;
        chunks.push(ChunkEntry {
            layer: k as u8,
            compressed_len: u32::try_from(packed.len()).map_err(|_| Error::Format("chunk exceeds 4 GiB".into()))?,
            raw_len: u32::try_from(body.len()).map_err(|_| Error::Format("chunk exceeds 4 GiB".into()))?,
            crc32: crc32fast::hash(body),
        });
        payload.extend_from_slice(&packed);
    }
    let header = Header {
        version: VERSION,
        preset: config.preset,
        spatial_dim: anchors.dim() as u8,
        local_scale_width: LOCAL_SCALE_WIDTH,
        anchor_count: n as u32,
        feature_dim: u16::try_from(anchors.feature_dim()).map_err(|_| Error::Domain("feature dim too large".into()))?,
        timestep_count: u16::try_from(t).map_err(|_| Error::Domain("too many timesteps".into()))?,
        quant: *q,
        chunks,
    };
    let mut out = Vec::with_capacity(header.len() + payload.len());
    header.write(&mut out);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes every complete chunk in `bytes`.
pub fn decode_prefix(bytes: &[u8]) -> Result<DecodedModel> {
    let header = Header::parse(bytes)?;
    let mut offset = header.len();
    let mut bodies = Vec::with_capacity(3);
    for c in &header.chunks {
        let end = offset + c.compressed_len as usize;
        if end > bytes.len() {
            break;
        }
        let body = decompress(&bytes[offset..end], c)?;
        bodies.push(body);
        offset = end;
    }
    if bodies.is_empty() {
        return Err(Error::InsufficientData("layer 0 chunk is incomplete".into()));
    }

    let dim = header.spatial_dim as usize;
    let fdim = header.feature_dim as usize;
    let q = header.quant;
    let mut state = DecodeState::new(dim, fdim);

    let mut r = Reader::new(&bodies[0], 0);
    let n0 = r.u32()? as usize;
    let ids = r.ids(n0)?;
    let ints = r.ints()?;
    let mut it = ints.into_iter();
    state.push_anchors(&ids, &mut it, &q)?;
    r.expect_end(it.len())?;
    state.masks[0] = (0..n0).collect();

    let mut timesteps: Vec<f64> = Vec::new();
    let mut global_rows: Vec<(usize, Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
    let mut local_rows: Vec<(usize, Vec<LocalRow>)> = Vec::new();

    for (k, body) in bodies.iter().enumerate().skip(1) {
        let layer = k as u8;
        let mut r = Reader::new(body, layer);
        if layer == 1 {
            let t = r.u32()? as usize;
            if t != header.timestep_count as usize || t == 0 {
                return Err(Error::Format(format!("layer 1 lists {t} timesteps")));
            }
            timesteps = (0..t).map(|_| r.f64()).collect::<Result<_>>()?;
        }
        let t = timesteps.len();
        let nref = r.u32()? as usize;
        let refs = r.ids(nref)?;
        let nsup = r.u32()? as usize;
        let sup_ids = r.ids(nsup)?;
        let ints = r.ints()?;
        let mut it = ints.into_iter();
        let first_new = state.ids.len();
        state.push_anchors(&sup_ids, &mut it, &q)?;
        let mut members = Vec::with_capacity(nref + nsup);
        for r in &refs {
            if *r as usize >= first_new {
                return Err(Error::Format(format!("layer {layer} references unknown anchor {r}")));
            }
            members.push(*r as usize);
        }
        members.extend(first_new..first_new + nsup);
        state.masks[k] = members.clone();
        let count = members.len();
        if layer == 1 {
            let mut disp = Vec::with_capacity(t);
            let mut feat = Vec::with_capacity(t);
            for _ in 0..t {
                disp.push(take_scaled(&mut it, count * dim, q.displacement)?);
                feat.push(take_scaled(&mut it, count * fdim, q.feature_residual)?);
            }
            global_rows.push((0, disp, feat));
            state.global_members = members;
        } else {
            let mut rows = Vec::with_capacity(t);
            for _ in 0..t {
                rows.push(LocalRow {
                    d_mu: take_scaled(&mut it, count * dim, q.local)?,
                    d_sigma: take_scaled(&mut it, count, q.local)?,
                    d_alpha: take_scaled(&mut it, count, q.local)?,
                    d_color: take_scaled(&mut it, count * 3, q.local)?,
                });
            }
            local_rows.push((0, rows));
            state.local_members = members;
        }
        r.expect_end(it.len())?;
    }

    let total = state.ids.len();
    let anchors = AnchorSet::from_parts(
        dim,
        fdim,
        state.positions,
        state.features,
        state.scales,
        state.offsets,
        state.opacities,
        state.colors,
    )?;
    let mut levels: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; total]);
    for (level, members) in state.masks.iter().enumerate() {
        for i in members {
            levels[level][*i] = 1.0;
        }
    }
    let masks = MaskBank::new(levels, crate::asset::MASK_THRESHOLD)?;

    let deformations = if global_rows.is_empty() {
        DeformationTable::empty(total, dim, fdim)
    } else {
        let t = timesteps.len();
        let (_, disp, feat) = &global_rows[0];
        let mut g = GlobalField {
            displacements: vec![0.0; t * total * dim],
            feature_residuals: vec![0.0; t * total * fdim],
        };
        for k in 0..t {
            for (row, &i) in state.global_members.iter().enumerate() {
                let dst = (k * total + i) * dim;
                g.displacements[dst..dst + dim].copy_from_slice(&disp[k][row * dim..(row + 1) * dim]);
                let dst = (k * total + i) * fdim;
                g.feature_residuals[dst..dst + fdim].copy_from_slice(&feat[k][row * fdim..(row + 1) * fdim]);
            }
        }
        let l = local_rows.first().map(|(_, rows)| {
            let mut l = LocalField {
                d_mu: vec![0.0; t * total * dim],
                d_sigma: vec![0.0; t * total],
                d_alpha: vec![0.0; t * total],
                d_color: vec![[0.0; 3]; t * total],
            };
            for (k, row) in rows.iter().enumerate() {
                for (j, &i) in state.local_members.iter().enumerate() {
                    let dst = k * total + i;
                    l.d_mu[dst * dim..(dst + 1) * dim].copy_from_slice(&row.d_mu[j * dim..(j + 1) * dim]);
                    l.d_sigma[dst] = row.d_sigma[j];
                    l.d_alpha[dst] = row.d_alpha[j];
                    l.d_color[dst] = [row.d_color[3 * j], row.d_color[3 * j + 1], row.d_color[3 * j + 2]];
                }
            }
            l
        });
        DeformationTable::new(total, dim, fdim, timesteps, Some(g), l)?
    };

    Ok(DecodedModel {
        max_level: LayerId::new((bodies.len() - 1) as u8)?,
        header,
        anchor_ids: state.ids,
        anchors,
        masks,
        deformations,
    })
}

struct LocalRow {
    d_mu: Vec<f64>,
    d_sigma: Vec<f64>,
    d_alpha: Vec<f64>,
    d_color: Vec<f64>,
}

struct DecodeState {
    dim: usize,
    fdim: usize,
    ids: Vec<u32>,
    positions: Vec<f64>,
    features: Vec<f64>,
    scales: Vec<f64>,
    offsets: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<[f64; 3]>,
    masks: [Vec<usize>; 3],
    global_members: Vec<usize>,
    local_members: Vec<usize>,
}

impl DecodeState {
    fn new(dim: usize, fdim: usize) -> Self {
        Self {
            dim,
            fdim,
            ids: Vec::new(),
            positions: Vec::new(),
            features: Vec::new(),
            scales: Vec::new(),
            offsets: Vec::new(),
            opacities: Vec::new(),
            colors: Vec::new(),
            masks: Default::default(),
            global_members: Vec::new(),
            local_members: Vec::new(),
        }
    }

    fn push_anchors(&mut self, ids: &[u32], it: &mut std::vec::IntoIter<i32>, q: &ContainerQuant) -> Result<()> {
        let n = ids.len();
        self.ids.extend_from_slice(ids);
        self.positions.extend(take_scaled(it, n * self.dim, q.position)?);
        self.features.extend(take_scaled(it, n * self.fdim, q.feature)?);
        self.scales.extend(take_scaled(it, n, q.scale)?.into_iter().map(f64::exp));
        self.offsets.extend(take_scaled(it, n * self.dim, q.offset)?);
        self.opacities.extend(take_scaled(it, n, q.opacity)?);
        let c = take_scaled(it, 3 * n, q.color)?;
        self.colors.extend(c.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        Ok(())
    }
}

/// Field-major quantized attributes of `indices`.
fn anchor_indices(anchors: &AnchorSet, indices: &[usize], q: &ContainerQuant) -> Result<Vec<i32>> {
    let mut out = Vec::new();
    out.extend(quantize_all(indices.iter().flat_map(|&i| anchors.position(i).iter().copied()), q.position)?);
    out.extend(quantize_all(indices.iter().flat_map(|&i| anchors.feature(i).iter().copied()), q.feature)?);
    out.extend(quantize_all(indices.iter().map(|&i| scale_attribute(anchors.scales()[i])), q.scale)?);
    out.extend(quantize_all(indices.iter().flat_map(|&i| anchors.offset(i).iter().copied()), q.offset)?);
    out.extend(quantize_all(indices.iter().map(|&i| anchors.opacities()[i]), q.opacity)?);
    out.extend(quantize_all(indices.iter().flat_map(|&i| anchors.colors()[i]), q.color)?);
    Ok(out)
}

fn quantize_all(values: impl Iterator<Item = f64>, step: f64) -> Result<Vec<i32>> {
    values.map(|v| quantize(v, step).map(|(i, _)| i)).collect()
}

fn take_scaled(it: &mut std::vec::IntoIter<i32>, count: usize, step: f64) -> Result<Vec<f64>> {
    if it.len() < count {
        return Err(Error::Format("chunk body ends early".into()));
    }
    Ok(it.by_ref().take(count).map(|i| i as f64 * step).collect())
}

/// Reconstruction a decoder produces for `value` at quantization `step`.
pub fn reconstruct(value: f64, step: f64) -> f64 {
    quantize(value, step).map(|(_, r)| r).unwrap_or(f64::NAN)
}

fn compress(body: &[u8], preset: u8) -> Result<Vec<u8>> {
    let mut enc = xz2::write::XzEncoder::new(Vec::new(), preset as u32);
    enc.write_all(body)?;
    Ok(enc.finish()?)
}

fn decompress(packed: &[u8], entry: &ChunkEntry) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(entry.raw_len as usize);
    xz2::read::XzDecoder::new(packed)
        .read_to_end(&mut out)
        .map_err(|e| Error::Integrity { layer: entry.layer, reason: format!("decompression failed: {e}") })?;
    if out.len() != entry.raw_len as usize {
        return Err(Error::Integrity {
            layer: entry.layer,
            reason: format!("decompressed {} bytes, table says {}", out.len(), entry.raw_len),
        });
    }
    let crc = crc32fast::hash(&out);
    if crc != entry.crc32 {
        return Err(Error::Integrity {
            layer: entry.layer,
            reason: format!("crc32 {crc:08x} does not match {:08x}", entry.crc32),
        });
    }
    Ok(out)
}

/// General-purpose compressed size of `body` at `preset`.
pub fn compressed_len(body: &[u8], preset: u8) -> Result<usize> {
    Ok(compress(body, preset)?.len())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn ids(&mut self, ids: &[usize]) {
        for i in ids {
            self.u32(*i as u32);
        }
    }

    /// Width flag (2 or 4) followed by the indices at that width.
    fn ints(&mut self, values: &[i32]) {
        let narrow = values.iter().all(|v| i16::try_from(*v).is_ok());
        self.buf.push(if narrow { 2 } else { 4 });
        self.u32(values.len() as u32);
        for v in values {
            if narrow {
                self.buf.extend_from_slice(&(*v as i16).to_le_bytes());
            } else {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Serializes quantized indices the way chunk bodies do.
pub fn pack_indices(values: &[i32]) -> Vec<u8> {
    let mut w = Writer::default();
    w.ints(values);
    w.finish()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Result<u8> {
        self.take(1).map(|b| b[0]).ok_or_else(|| Error::InsufficientData("header ends early".into()))
    }

    fn u16(&mut self) -> Result<u16> {
        self.take(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| Error::InsufficientData("header ends early".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::InsufficientData("header ends early".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::InsufficientData("header ends early".into()))
    }
}

/// Chunk-body reader; structural problems inside a verified chunk are
/// format errors attributed to its layer.
struct Reader<'a> {
    cur: Cursor<'a>,
    layer: u8,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], layer: u8) -> Self {
        Self { cur: Cursor::new(bytes), layer }
    }

    fn err(&self) -> Error {
        Error::Format(format!("layer {} chunk body ends early", self.layer))
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.u32().map_err(|_| self.err())
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.f64().map_err(|_| self.err())
    }

    fn ids(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn ints(&mut self) -> Result<Vec<i32>> {
        let width = self.cur.u8().map_err(|_| self.err())?;
        let n = self.u32()? as usize;
        let bytes = self.cur.take(n * width as usize).ok_or_else(|| self.err())?;
        match width {
            2 => Ok(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as i32).collect()),
            4 => Ok(bytes.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect()),
            w => Err(Error::Format(format!("layer {} index width {w}", self.layer))),
        }
    }

    fn expect_end(&self, leftover_ints: usize) -> Result<()> {
        if leftover_ints != 0 || self.cur.pos != self.cur.bytes.len() {
            return Err(Error::Format(format!("layer {} chunk has trailing data", self.layer)));
        }
        Ok(())
    }
}
