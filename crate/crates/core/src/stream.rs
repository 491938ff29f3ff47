//! Bandwidth-trace streaming simulator.
//!
//! Times and byte counts are exact rationals; a segment boundary or a layer
//! completion never accumulates floating-point drift. Sizes use decimal
//! megabytes and throughput decimal megabits per second, so one Mbps moves
//! 125 000 bytes per second.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::asset::LayerId;
use crate::bitstream::LayerManifest;
use crate::error::{Error, Result};

/// `table6.csv`: `method,s_first_mb` for the first-frame latency study.
pub const TABLE6_CSV: &str = include_str!("../data/table6.csv");
pub const TABLE6_BANDWIDTHS_MBPS: [&str; 3] = ["2", "10", "50"];

const BYTES_PER_MB: i64 = 1_000_000;
const BYTES_PER_SECOND_PER_MBPS: i64 = 125_000;

/// Parses a plain decimal such as `0.436`, `18.37` or `2e-3` exactly.
pub fn parse_decimal(text: &str) -> Result<BigRational> {
    let s = text.trim();
    let bad = || Error::Domain(format!("'{text}' is not a decimal number"));
    let (mantissa, exp) = match s.find(['e', 'E']) {
        Some(p) => (&s[..p], s[p + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let digits: BigInt = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let shift = exp - frac.len() as i32;
    let ten = BigInt::from(10);
    let mut value = if shift >= 0 {
        BigRational::from_integer(digits * num_traits::pow(ten, shift as usize))
    } else {
        BigRational::new(digits, num_traits::pow(ten, (-shift) as usize))
    };
    if neg {
        value = -value;
    }
    Ok(value)
}

fn rational(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Rounds half away from zero and prints exactly `decimals` digits.
pub fn format_fixed(x: &BigRational, decimals: usize) -> String {
    let scale = num_traits::pow(BigInt::from(10), decimals);
    let scaled = (x * BigRational::from_integer(scale.clone())).round().to_integer();
    let neg = scaled < BigInt::zero();
    let abs = if neg { -scaled } else { scaled };
    let int = &abs / &scale;
    let frac = &abs % &scale;
    let sign = if neg { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{:0>width$}", frac.to_string(), width = decimals)
    }
}

/// Presentation rounding of the latency table: one decimal from 10 s up,
/// two decimals below.
pub fn format_latency(seconds: &BigRational) -> String {
    if *seconds >= rational(10) {
        format_fixed(seconds, 1)
    } else {
        format_fixed(seconds, 2)
    }
}

/// Segment duration; the last segment of a trace may last forever.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Duration {
    Finite(BigRational),
    Forever,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub duration: Duration,
    pub mbps: BigRational,
}

impl Segment {
    pub fn new(duration_s: &str, mbps: &str) -> Result<Self> {
        let duration = if duration_s.trim() == "inf" {
            Duration::Forever
        } else {
            Duration::Finite(parse_decimal(duration_s)?)
        };
        Ok(Self { duration, mbps: parse_decimal(mbps)? })
    }
}

/// Piecewise-constant throughput over time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandwidthTrace {
    segments: Vec<Segment>,
}

impl BandwidthTrace {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Domain("trace needs at least one segment".into()));
        }
        let last = segments.len() - 1;
        for (k, s) in segments.iter().enumerate() {
            match &s.duration {
                Duration::Finite(d) if *d <= BigRational::zero() => {
                    return Err(Error::Domain(format!("segment {k} has non-positive duration")))
                }
                Duration::Forever if k != last => {
                    return Err(Error::Domain(format!("segment {k} is infinite but not last")))
                }
                _ => {}
            }
            if s.mbps < BigRational::zero() {
                return Err(Error::Domain(format!("segment {k} has negative throughput")));
            }
        }
        Ok(Self { segments })
    }

    /// Constant throughput forever.
    pub fn constant(mbps: BigRational) -> Result<Self> {
        Self::new(vec![Segment { duration: Duration::Forever, mbps }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Parses `duration_s,mbps` lines. A header line with those names, blank
    /// lines and `#` comments are skipped. Line numbers in errors are 1-based.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split(',').map(str::trim).collect();
            if fields == ["duration_s", "mbps"] {
                continue;
            }
            if fields.len() != 2 {
                return Err(Error::Parse { line, reason: format!("expected 2 fields, found {}", fields.len()) });
            }
            let seg = Segment::new(fields[0], fields[1]).map_err(|e| Error::Parse { line, reason: e.to_string() })?;
            segments.push((line, seg));
        }
        let lines: Vec<usize> = segments.iter().map(|(l, _)| *l).collect();
        Self::new(segments.into_iter().map(|(_, s)| s).collect()).map_err(|e| {
            let reason = e.to_string();
            let line = lines
                .iter()
                .enumerate()
                .find(|(k, _)| reason.contains(&format!("segment {k} ")))
                .map(|(_, l)| *l)
                .unwrap_or(0);
            Error::Parse { line, reason }
        })
    }
}

impl FromStr for BandwidthTrace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_csv(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallPolicy {
    /// Hold the received layer and emit stall events on zero throughput.
    #[default]
    Freeze,
    /// Same timeline without stall events.
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "kebab-case")]
pub enum EventKind {
    LayerComplete(u8),
    StallBegin,
    StallEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub time_s: BigRational,
    pub kind: EventKind,
    pub bytes_received: BigRational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamTimeline {
    pub events: Vec<StreamEvent>,
    /// Layer-0 completion instant; `None` when layer 0 never arrives.
    pub first_frame_time: Option<BigRational>,
    pub final_level: Option<LayerId>,
    pub layer_count: usize,
}

impl StreamTimeline {
    pub fn is_complete(&self) -> bool {
        self.final_level.map(|l| l.index() + 1) == Some(self.layer_count)
    }

    pub fn completion_times(&self) -> Vec<BigRational> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::LayerComplete(_)))
            .map(|e| e.time_s.clone())
            .collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Ev<'a> {
            time_s: f64,
            time_exact: String,
            #[serde(flatten)]
            kind: &'a EventKind,
            bytes_received: f64,
            bytes_exact: String,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            first_frame_time_s: Option<f64>,
            first_frame_time_exact: Option<String>,
            final_level: Option<u8>,
            layer_count: usize,
            complete: bool,
            events: Vec<Ev<'a>>,
        }
        let doc = Doc {
            first_frame_time_s: self.first_frame_time.as_ref().map(to_f64),
            first_frame_time_exact: self.first_frame_time.as_ref().map(|t| t.to_string()),
            final_level: self.final_level.map(|l| l.value()),
            layer_count: self.layer_count,
            complete: self.is_complete(),
            events: self
                .events
                .iter()
                .map(|e| Ev {
                    time_s: to_f64(&e.time_s),
                    time_exact: e.time_s.to_string(),
                    kind: &e.kind,
                    bytes_received: to_f64(&e.bytes_received),
                    bytes_exact: e.bytes_received.to_string(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("timeline serializes")
    }
}

/// `8·S/B` seconds for `S` megabytes over `B` megabits per second.
pub fn first_frame_latency(size_mb: f64, bandwidth_mbps: f64) -> Result<f64> {
    if !(bandwidth_mbps > 0.0) || !bandwidth_mbps.is_finite() {
        return Err(Error::Domain(format!("bandwidth {bandwidth_mbps} Mbps must be positive")));
    }
    if !(size_mb >= 0.0) {
        return Err(Error::Domain(format!("size {size_mb} MB must be non-negative")));
    }
    Ok(8.0 * size_mb / bandwidth_mbps)
}

pub fn first_frame_latency_exact(size_mb: &BigRational, bandwidth_mbps: &BigRational) -> Result<BigRational> {
    if *bandwidth_mbps <= BigRational::zero() {
        return Err(Error::Domain(format!("bandwidth {bandwidth_mbps} Mbps must be positive")));
    }
    if *size_mb < BigRational::zero() {
        return Err(Error::Domain(format!("size {size_mb} MB must be non-negative")));
    }
    Ok(rational(8) * size_mb / bandwidth_mbps)
}

/// Integrates the trace and records when each cumulative size is reached.
pub fn simulate(manifest: &LayerManifest, trace: &BandwidthTrace, policy: StallPolicy) -> Result<StreamTimeline> {
    let targets: Vec<BigRational> = manifest.cumulative_bytes.iter().map(|b| rational(*b as i64)).collect();
    if targets.is_empty() || targets.len() > 3 {
        return Err(Error::Domain(format!("manifest has {} layers", targets.len())));
    }
    let mut events = Vec::new();
    let mut t = BigRational::zero();
    let mut received = BigRational::zero();
    let mut next = 0usize;
    let mut stalled = false;

    for seg in trace.segments() {
        if next == targets.len() {
            break;
        }
        let rate = &seg.mbps * rational(BYTES_PER_SECOND_PER_MBPS);
        if rate.is_zero() {
            if !stalled && policy == StallPolicy::Freeze {
                events.push(StreamEvent { time_s: t.clone(), kind: EventKind::StallBegin, bytes_received: received.clone() });
            }
            stalled = true;
            match &seg.duration {
                Duration::Finite(d) => t += d,
                Duration::Forever => break,
            }
            continue;
        }
        if stalled {
            if policy == StallPolicy::Freeze {
                events.push(StreamEvent { time_s: t.clone(), kind: EventKind::StallEnd, bytes_received: received.clone() });
            }
            stalled = false;
        }
        let end = match &seg.duration {
            Duration::Finite(d) => Some(&t + d),
            Duration::Forever => None,
        };
        while next < targets.len() {
            let at = &t + (&targets[next] - &received) / &rate;
            if end.as_ref().is_some_and(|e| at > *e) {
                break;
            }
            t = at;
            received = targets[next].clone();
            events.push(StreamEvent {
                time_s: t.clone(),
                kind: EventKind::LayerComplete(next as u8),
                bytes_received: received.clone(),
            });
            next += 1;
        }
        if let Some(e) = end {
            received += (&e - &t) * &rate;
            t = e;
        }
    }

    let first_frame_time = events
        .iter()
        .find(|e| e.kind == EventKind::LayerComplete(0))
        .map(|e| e.time_s.clone());
    let final_level = next.checked_sub(1).map(|l| LayerId::new(l as u8)).transpose()?;
    Ok(StreamTimeline { events, first_frame_time, final_level, layer_count: targets.len() })
}

/// Megabytes to whole bytes, rounding to nearest.
pub fn mb_to_bytes(size_mb: &BigRational) -> u64 {
    (size_mb * rational(BYTES_PER_MB)).round().to_integer().to_u64().unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, Serialize)]
struct Representation {
    id: String,
    level: u8,
    description: &'static str,
    url: String,
    byte_range: ByteRange,
    range_header: String,
    cumulative_bytes: u64,
    incremental_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
struct ByteRange {
    start: u64,
    end_exclusive: u64,
}

#[derive(Debug, Clone, Serialize)]
struct AbrDocument {
    format: &'static str,
    url: String,
    total_bytes: u64,
    representations: Vec<Representation>,
}

pub fn layer_description(level: usize) -> &'static str {
    match level {
        0 => "static scaffold",
        1 => "global deformation",
        _ => "local refinement",
    }
}

/// JSON manifest with one prefix byte range per level of a single `.pd4g`.
pub fn emit_abr_manifest(manifest: &LayerManifest, base_url: &str) -> String {
    let doc = AbrDocument {
        format: "pd4g-abr/1",
        url: base_url.to_string(),
        total_bytes: manifest.total_bytes(),
        representations: manifest
            .cumulative_bytes
            .iter()
            .enumerate()
            .map(|(k, s)| Representation {
                id: format!("layer{k}"),
                level: k as u8,
                description: layer_description(k),
                url: base_url.to_string(),
                byte_range: ByteRange { start: 0, end_exclusive: *s },
                range_header: format!("bytes=0-{}", s.saturating_sub(1)),
                cumulative_bytes: *s,
                incremental_bytes: manifest.layer_bytes.get(k).copied().unwrap_or(0),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("abr manifest serializes")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyRow {
    pub label: String,
    pub size_mb: BigRational,
    pub seconds: Vec<BigRational>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyTable {
    pub bandwidths_mbps: Vec<BigRational>,
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    pub fn rounded(&self) -> Vec<Vec<String>> {
        self.rows.iter().map(|r| r.seconds.iter().map(format_latency).collect()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,s_first_mb");
        for b in &self.bandwidths_mbps {
            out.push_str(&format!(",b_{}_mbps_s", decimal_string(b)));
        }
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(self.rounded()) {
            out.push_str(&format!("{},{}", row.label, decimal_string(&row.size_mb)));
            for c in cells {
                out.push(',');
                out.push_str(&c);
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for LatencyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} {:>10}", "method", "S (MB)")?;
        for b in &self.bandwidths_mbps {
            write!(f, " {:>12}", format!("{} Mbps", decimal_string(b)))?;
        }
        writeln!(f)?;
        for (row, cells) in self.rows.iter().zip(self.rounded()) {
            write!(f, "{:<28} {:>10}", row.label, decimal_string(&row.size_mb))?;
            for c in cells {
                write!(f, " {:>12}", format!("{c} s"))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Shortest exact decimal rendering of a terminating rational, else `p/q`.
pub fn decimal_string(x: &BigRational) -> String {
    for d in 0..=12 {
        let scaled = x * BigRational::from_integer(num_traits::pow(BigInt::from(10), d));
        if scaled.is_integer() {
            return format_fixed(x, d);
        }
    }
    x.to_string()
}

pub fn latency_table(sizes: &[(String, BigRational)], bandwidths_mbps: &[BigRational]) -> Result<LatencyTable> {
    let rows = sizes
        .iter()
        .map(|(label, s)| {
            Ok(LatencyRow {
                label: label.clone(),
                size_mb: s.clone(),
                seconds: bandwidths_mbps.iter().map(|b| first_frame_latency_exact(s, b)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LatencyTable { bandwidths_mbps: bandwidths_mbps.to_vec(), rows })
}

/// Reads `method,s_first_mb` rows.
pub fn parse_sizes_csv(text: &str) -> Result<Vec<(String, BigRational)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (label, size) = content
            .rsplit_once(',')
            .ok_or_else(|| Error::Parse { line, reason: "expected method,s_first_mb".into() })?;
        if size.trim() == "s_first_mb" {
            continue;
        }
        let v = parse_decimal(size).map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        if v < BigRational::zero() {
            return Err(Error::Parse { line, reason: "size must be non-negative".into() });
        }
        out.push((label.trim().to_string(), v));
    }
    Ok(out)
}

pub fn table6() -> LatencyTable {
    let sizes = parse_sizes_csv(TABLE6_CSV).expect("bundled table parses");
    let bands: Vec<BigRational> = TABLE6_BANDWIDTHS_MBPS.iter().map(|b| parse_decimal(b).unwrap()).collect();
    latency_table(&sizes, &bands).expect("bundled bandwidths are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> BigRational {
        parse_decimal(s).unwrap()
    }

    fn mb_manifest(sizes: &[&str]) -> LayerManifest {
        LayerManifest::from_cumulative(sizes.iter().map(|s| mb_to_bytes(&q(s))).collect()).unwrap()
    }

    #[test]
    fn decimal_parsing_is_exact() {
        assert_eq!(q("0.436"), BigRational::new(436.into(), 1000.into()));
        assert_eq!(q("2e-3"), BigRational::new(1.into(), 500.into()));
        assert_eq!(q("18.37"), BigRational::new(1837.into(), 100.into()));
        assert_eq!(q(".5"), BigRational::new(1.into(), 2.into()));
        assert_eq!(q("1E2"), rational(100));
        for bad in ["", ".", "1.2.3", "abc", "1e", "0x10"] {
            assert!(parse_decimal(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn fixed_formatting_rounds_half_away() {
        assert_eq!(format_fixed(&q("1.744"), 2), "1.74");
        assert_eq!(format_fixed(&q("0.06976"), 2), "0.07");
        assert_eq!(format_fixed(&q("2.345"), 2), "2.35");
        assert_eq!(format_fixed(&q("314"), 1), "314.0");
        assert_eq!(format_fixed(&q("0.004"), 2), "0.00");
        assert_eq!(decimal_string(&q("0.4360")), "0.436");
        assert_eq!(decimal_string(&q("2")), "2");
    }

    #[test]
    fn first_frame_examples() {
        assert!((first_frame_latency(0.436, 2.0).unwrap() - 1.744).abs() < 1e-12);
        assert!((first_frame_latency(6.88, 50.0).unwrap() - 1.1008).abs() < 1e-12);
        assert!((first_frame_latency(18.37, 2.0).unwrap() - 73.48).abs() < 1e-12);
        assert_eq!(first_frame_latency_exact(&q("0.436"), &q("2")).unwrap(), q("1.744"));
        assert!(first_frame_latency(1.0, 0.0).is_err());
        assert!(first_frame_latency(1.0, -2.0).is_err());
    }

    #[test]
    fn table6_all_cells() {
        let want = [
            ["929.6", "185.9", "37.2"],
            ["437.6", "87.5", "17.5"],
            ["314.0", "62.8", "12.6"],
            ["73.5", "14.7", "2.94"],
            ["27.5", "5.5", "1.10"],
            ["1.74", "0.35", "0.07"],
        ];
        let table = table6();
        assert_eq!(table.rows.len(), 6);
        for (row, want) in table.rounded().iter().zip(want) {
            for (got, want) in row.iter().zip(want) {
                assert_eq!(parse_decimal(got).unwrap(), q(want), "{got} vs {want}");
            }
        }
        let csv = table.to_csv();
        assert!(csv.starts_with("method,s_first_mb,b_2_mbps_s,b_10_mbps_s,b_50_mbps_s\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn latency_table_scaling() {
        let t = latency_table(&[("x".into(), q("3.3"))], &[q("4")]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].seconds.len(), 1);
        let sizes = parse_sizes_csv(TABLE6_CSV).unwrap();
        let a = latency_table(&sizes, &[q("3"), q("7")]).unwrap();
        let b = latency_table(&sizes, &[q("6"), q("14")]).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for (x, y) in ra.seconds.iter().zip(&rb.seconds) {
                assert_eq!(x, &(y * rational(2)));
            }
        }
    }

    #[test]
    fn constant_trace_layer_times() {
        let m = mb_manifest(&["0.436", "1.623", "6.898"]);
        let tl = simulate(&m, &BandwidthTrace::constant(q("2")).unwrap(), StallPolicy::Freeze).unwrap();
        assert_eq!(tl.completion_times(), vec![q("1.744"), q("6.492"), q("27.592")]);
        assert_eq!(tl.first_frame_time, Some(q("1.744")));
        assert_eq!(tl.final_level, Some(LayerId::LOCAL));
        assert!(tl.is_complete());
    }

    #[test]
    fn stall_and_freeze() {
        let m = mb_manifest(&["0.5", "2", "5"]);
        let trace = BandwidthTrace::from_csv("duration_s,mbps\n1,8\ninf,0\n").unwrap();
        let tl = simulate(&m, &trace, StallPolicy::Freeze).unwrap();
        assert_eq!(tl.first_frame_time, Some(q("0.5")));
        assert_eq!(tl.final_level, Some(LayerId::STATIC));
        assert!(!tl.is_complete());
        assert_eq!(tl.events.len(), 2);
        assert_eq!(tl.events[1].kind, EventKind::StallBegin);
        assert_eq!(tl.events[1].time_s, rational(1));
        assert_eq!(tl.events[1].bytes_received, rational(1_000_000));
        let silent = simulate(&m, &trace, StallPolicy::Silent).unwrap();
        assert_eq!(silent.events.len(), 1);
    }

    #[test]
    fn resume_after_collapse() {
        let m = mb_manifest(&["0.5", "2", "5"]);
        let trace = BandwidthTrace::from_csv("1,8\n3,0\ninf,4\n").unwrap();
        let tl = simulate(&m, &trace, StallPolicy::Freeze).unwrap();
        let kinds: Vec<EventKind> = tl.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EventKind::LayerComplete(0),
                EventKind::StallBegin,
                EventKind::StallEnd,
                EventKind::LayerComplete(1),
                EventKind::LayerComplete(2)
            ]
        );
        // 1 MB by t=1; 1 MB more at 0.5 MB/s after t=4
        assert_eq!(tl.events[3].time_s, rational(6));
        assert_eq!(tl.events[4].time_s, rational(12));
    }

    #[test]
    fn zero_trace_is_incomplete_not_error() {
        let m = mb_manifest(&["0.5", "2", "5"]);
        let tl = simulate(&m, &BandwidthTrace::from_csv("inf,0").unwrap(), StallPolicy::Freeze).unwrap();
        assert_eq!(tl.final_level, None);
        assert_eq!(tl.first_frame_time, None);
        let tl = simulate(&m, &BandwidthTrace::from_csv("2,1").unwrap(), StallPolicy::Freeze).unwrap();
        assert_eq!(tl.final_level, None);
    }

    #[test]
    fn fast_link_finishes_within_a_millisecond() {
        let m = mb_manifest(&["0.436", "1.623", "6.898"]);
        let tl = simulate(&m, &BandwidthTrace::constant(q("1e6")).unwrap(), StallPolicy::Freeze).unwrap();
        for t in tl.completion_times() {
            assert!(t < q("0.001"));
        }
    }

    #[test]
    fn trace_parse_errors_name_lines() {
        let e = BandwidthTrace::from_csv("duration_s,mbps\n1,2\nfoo,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = BandwidthTrace::from_csv("1,2\n1,2,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = BandwidthTrace::from_csv("1,2\n0,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
        let e = BandwidthTrace::from_csv("inf,2\n1,3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e:?}");
        assert!(BandwidthTrace::from_csv("1,-2").is_err());
        assert!(BandwidthTrace::from_csv("# nothing\n").is_err());
    }

    #[test]
    fn abr_manifest_ranges() {
        let m = mb_manifest(&["0.5", "2", "5"]);
        let json = emit_abr_manifest(&m, "https://example.org/scene.pd4g");
        assert_eq!(json, emit_abr_manifest(&m, "https://example.org/scene.pd4g"));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let reps = v["representations"].as_array().unwrap();
        assert_eq!(reps.len(), 3);
        let ends: Vec<u64> = reps.iter().map(|r| r["byte_range"]["end_exclusive"].as_u64().unwrap()).collect();
        assert_eq!(ends, m.cumulative_bytes);
        assert_eq!(reps[0]["range_header"], "bytes=0-499999");
    }

    #[test]
    fn timeline_json_keeps_exact_values() {
        let m = mb_manifest(&["0.436"]);
        let tl = simulate(&m, &BandwidthTrace::constant(q("3")).unwrap(), StallPolicy::Freeze).unwrap();
        let v: serde_json::Value = serde_json::from_str(&tl.to_json()).unwrap();
        assert_eq!(v["first_frame_time_exact"], "436/375");
        assert_eq!(v["events"][0]["kind"], "layer-complete");
        assert_eq!(v["events"][0]["layer"], 0);
        assert_eq!(v["complete"], true);
    }
}
