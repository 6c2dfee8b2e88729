//! View-frame (VF) extraction.
//!
//! Video-frame packets are long and arrive in tight bursts. Two thresholds are
//! estimated once from the first segment of a session:
//!
//! * `len_th`, a quarter of the largest packet length seen;
//! * `dur_th`, placed between the first two peaks of the packet inter-arrival
//!   histogram (taken over `log10(IAT)`, since IATs span several decades).
//!
//! Packets at least `len_th` long whose spacing stays within `dur_th` are
//! grouped into one frame. Frames are then bucketed into fixed-duration
//! segments to produce the per-segment feature vector `[count, size, iat]`.

use std::collections::BTreeSet;
use std::io::Read;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{Direction, PacketRecord};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_SEGMENT_DURATION: f64 = 1.0;
pub const FEATURES_CSV_HEADER: &str = "segment,f_c,f_s,f_iat";

#[derive(Debug, Error)]
pub enum VfError {
    #[error("segment holds no packets")]
    EmptySegment,
    #[error("inter-arrival distribution is degenerate: {0}")]
    DegenerateDistribution(String),
    #[error("invalid VF option: {0}")]
    BadOption(String),
    #[error("feature CSV: expected header `{FEATURES_CSV_HEADER}`, found `{0}`")]
    SchemaMismatch(String),
    #[error("feature CSV line {line}: {message}")]
    RowParseError { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VfError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    /// Minimum packet length (bytes) for a packet to belong to a frame.
    pub len_th: f64,
    /// Maximum spacing (seconds) between consecutive packets of one frame.
    pub dur_th: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Frame {
    pub start_ts: f64,
    pub end_ts: f64,
    pub size: u64,
    pub packet_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentFeatures {
    pub segment_index: usize,
    pub f_c: usize,
    pub f_s: u64,
    /// Mean spacing between frame starts; `None` with fewer than two frames.
    pub f_iat: Option<f64>,
}

impl SegmentFeatures {
    /// Mean frame size in bytes, `None` for an empty segment.
    pub fn mean_frame_size(&self) -> Option<f64> {
        (self.f_c > 0).then(|| self.f_s as f64 / self.f_c as f64)
    }
}

/// Result of the duration-threshold histogram analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IatHistogram {
    pub bins: usize,
    /// log10 of the lower edge of bin 0.
    pub log_lo: f64,
    /// Bin width in decades.
    pub log_width: f64,
    pub counts: Vec<usize>,
    /// Peak centers in seconds, ascending.
    pub peaks: Vec<f64>,
}

impl IatHistogram {
    pub fn center_log10(&self, bin: usize) -> f64 {
        self.log_lo + (bin as f64 + 0.5) * self.log_width
    }
}

/// `0.25 * max(length)` over the packets.
pub fn estimate_len_threshold(packets: &[PacketRecord]) -> Result<f64> {
    packets
        .iter()
        .map(|p| p.length)
        .max()
        .map(|m| 0.25 * f64::from(m))
        .ok_or(VfError::EmptySegment)
}

/// Histogram of `log10(IAT)` over strictly positive packet spacings.
const LOG_SPAN_EPS: f64 = 1e-9;

pub fn iat_histogram(packets: &[PacketRecord], bins: usize) -> Result<IatHistogram> {
    if bins < 1 {
        return Err(VfError::BadOption("histogram needs at least one bin".into()));
    }
    if packets.len() < 3 {
        return Err(VfError::DegenerateDistribution(format!(
            "need at least 3 packets, got {}",
            packets.len()
        )));
    }
    let logs: Vec<f64> = packets
        .windows(2)
        .map(|w| w[1].ts - w[0].ts)
        .filter(|d| *d > 0.0)
        .map(f64::log10)
        .collect();
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    // IATs equal up to float rounding count as one value
    if logs.len() < 2 || hi - lo < LOG_SPAN_EPS {
        return Err(VfError::DegenerateDistribution(
            "fewer than two distinct positive inter-arrival times".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &logs {
        let idx = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let mut hist = IatHistogram { bins, log_lo: lo, log_width: width, counts, peaks: Vec::new() };
    hist.peaks = find_peaks(&hist.counts)
        .into_iter()
        .map(|c| 10f64.powf(lo + (c + 0.5) * width))
        .collect();
    Ok(hist)
}

/// Peak positions (fractional bin index) in ascending order.
///
/// A peak is a bin whose count exceeds both neighbours, with zero counts
/// assumed outside the range. A flat run of equal non-zero counts bounded by
/// strictly lower neighbours counts as a single peak at the run's middle.
pub(crate) fn find_peaks(counts: &[usize]) -> Vec<f64> {
    let n = counts.len();
    let at = |i: isize| -> usize {
        if i < 0 || i as usize >= n {
            0
        } else {
            counts[i as usize]
        }
    };
    let mut peaks = Vec::new();
    let mut i = 0usize;
    while i < n {
        let c = counts[i];
        let mut j = i;
        while j + 1 < n && counts[j + 1] == c {
            j += 1;
        }
        if c > 0 && at(i as isize - 1) < c && at(j as isize + 1) < c {
            peaks.push((i + j) as f64 / 2.0);
        }
        i = j + 1;
    }
    peaks
}

/// Duration threshold at the geometric midpoint of the first two IAT peaks.
pub fn estimate_dur_threshold(packets: &[PacketRecord], bins: usize) -> Result<(f64, IatHistogram)> {
    let hist = iat_histogram(packets, bins)?;
    if hist.peaks.len() < 2 {
        return Err(VfError::DegenerateDistribution(format!(
            "found {} histogram peak(s), need two",
            hist.peaks.len()
        )));
    }
    let dur = (hist.peaks[0] * hist.peaks[1]).sqrt();
    Ok((dur, hist))
}

/// Options for frame grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOptions {
    pub min_packets: usize,
    pub split_on_small_packet: bool,
    pub directions: BTreeSet<Direction>,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self::downlink_only()
    }
}

impl FrameOptions {
    /// VR sessions: video frames travel downlink only.
    pub fn downlink_only() -> Self {
        Self {
            min_packets: 1,
            split_on_small_packet: false,
            directions: [Direction::Downlink].into_iter().collect(),
        }
    }

    /// AR/MR sessions carry video in both directions.
    pub fn both_directions() -> Self {
        Self {
            directions: [Direction::Downlink, Direction::Uplink].into_iter().collect(),
            ..Self::downlink_only()
        }
    }

    pub fn accepts(&self, d: Direction) -> bool {
        self.directions.contains(&d)
    }
}

struct OpenFrame {
    start_ts: f64,
    last_ts: f64,
    size: u64,
    count: usize,
}

/// Group frame-eligible packets into frames.
pub fn identify_frames(packets: &[PacketRecord], th: Thresholds, opts: &FrameOptions) -> Vec<Frame> {
    let mut frames = Vec::new();
    let mut open: Option<OpenFrame> = None;
    let mut small_since_last = false;

    let close = |f: OpenFrame, frames: &mut Vec<Frame>| {
        if f.count >= opts.min_packets.max(1) {
            frames.push(Frame { start_ts: f.start_ts, end_ts: f.last_ts, size: f.size, packet_count: f.count });
        }
    };

    for p in packets.iter().filter(|p| opts.accepts(p.direction)) {
        if f64::from(p.length) < th.len_th {
            small_since_last = true;
            continue;
        }
        let continues = match &open {
            Some(f) => p.ts - f.last_ts <= th.dur_th && !(opts.split_on_small_packet && small_since_last),
            None => false,
        };
        if continues {
            let f = open.as_mut().expect("open frame");
            f.last_ts = p.ts;
            f.size += u64::from(p.length);
            f.count += 1;
        } else {
            if let Some(f) = open.take() {
                close(f, &mut frames);
            }
            open = Some(OpenFrame { start_ts: p.ts, last_ts: p.ts, size: u64::from(p.length), count: 1 });
        }
        small_since_last = false;
    }
    if let Some(f) = open.take() {
        close(f, &mut frames);
    }
    frames
}

/// Bucket frames into `num_segments` consecutive segments of equal duration.
pub fn segment_features(
    frames: &[Frame],
    session_start: f64,
    segment_duration: f64,
    num_segments: usize,
) -> Vec<SegmentFeatures> {
    assert!(segment_duration > 0.0, "segment_duration must be positive");
    let mut starts: Vec<Vec<f64>> = vec![Vec::new(); num_segments];
    let mut sizes = vec![0u64; num_segments];
    for f in frames {
        let rel = (f.start_ts - session_start) / segment_duration;
        if rel < 0.0 {
            continue;
        }
        let idx = rel.floor() as usize;
        if idx < num_segments {
            starts[idx].push(f.start_ts);
            sizes[idx] += f.size;
        }
    }
    starts
        .into_iter()
        .zip(sizes)
        .enumerate()
        .map(|(segment_index, (s, f_s))| {
            let f_iat = (s.len() >= 2).then(|| (s[s.len() - 1] - s[0]) / (s.len() - 1) as f64);
            SegmentFeatures { segment_index, f_c: s.len(), f_s, f_iat }
        })
        .collect()
}

/// Where the duration threshold came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DurSource {
    Estimated,
    Fallback,
}

/// Threshold report written next to the feature table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub len_th: f64,
    pub dur_th: f64,
    pub bins: usize,
    pub peaks: Vec<f64>,
    pub dur_source: DurSource,
    pub length_basis: &'static str,
    pub peak_rule: &'static str,
}

impl ThresholdReport {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds { len_th: self.len_th, dur_th: self.dur_th }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("threshold report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VfConfig {
    pub segment_duration: f64,
    pub bins: usize,
    pub fallback_dur_th: f64,
    pub frames: FrameOptions,
}

impl Default for VfConfig {
    fn default() -> Self {
        Self {
            segment_duration: DEFAULT_SEGMENT_DURATION,
            bins: DEFAULT_BINS,
            fallback_dur_th: 0.001,
            frames: FrameOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VfOutput {
    pub report: ThresholdReport,
    pub frames: Vec<Frame>,
    pub features: Vec<SegmentFeatures>,
}

/// Full VF pass over a session: thresholds frozen from the first segment,
/// frames over the whole trace, features for every covered segment.
pub fn extract(packets: &[PacketRecord], cfg: &VfConfig) -> Result<VfOutput> {
    if !(cfg.segment_duration > 0.0) {
        return Err(VfError::BadOption("segment_duration must be positive".into()));
    }
    let eligible: Vec<PacketRecord> =
        packets.iter().copied().filter(|p| cfg.frames.accepts(p.direction)).collect();
    let start = eligible.first().ok_or(VfError::EmptySegment)?.ts;
    let first_segment: Vec<PacketRecord> = eligible
        .iter()
        .copied()
        .take_while(|p| p.ts - start < cfg.segment_duration)
        .collect();

    let len_th = estimate_len_threshold(&first_segment)?;
    let (dur_th, peaks, dur_source) = match estimate_dur_threshold(&first_segment, cfg.bins) {
        Ok((d, h)) => (d, h.peaks, DurSource::Estimated),
        Err(VfError::DegenerateDistribution(why)) => {
            log::warn!("dur_th fallback to {}: {why}", cfg.fallback_dur_th);
            (cfg.fallback_dur_th, Vec::new(), DurSource::Fallback)
        }
        Err(e) => return Err(e),
    };
    let report = ThresholdReport {
        len_th,
        dur_th,
        bins: cfg.bins,
        peaks,
        dur_source,
        length_basis: "captured",
        peak_rule: "log10 histogram, first two local maxima, geometric midpoint",
    };
    let frames = identify_frames(packets, report.thresholds(), &cfg.frames);
    let last = eligible.last().map_or(start, |p| p.ts);
    let num_segments = (((last - start) / cfg.segment_duration).floor() as usize) + 1;
    let features = segment_features(&frames, start, cfg.segment_duration, num_segments);
    Ok(VfOutput { report, frames, features })
}

/// Render features as `segment,f_c,f_s,f_iat` with `NA` for absent IAT.
pub fn emit_features_csv(features: &[SegmentFeatures]) -> String {
    let mut s = String::from(FEATURES_CSV_HEADER);
    s.push('\n');
    for f in features {
        let iat = f.f_iat.map_or_else(|| "NA".to_string(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{}\n", f.segment_index, f.f_c, f.f_s, iat));
    }
    s
}

pub fn parse_features_csv<R: Read>(reader: R) -> Result<Vec<SegmentFeatures>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| VfError::RowParseError { line: 1, message: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != FEATURES_CSV_HEADER {
        return Err(VfError::SchemaMismatch(headers));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| VfError::RowParseError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |field: &str, v: &str| VfError::RowParseError { line, message: format!("bad {field} `{v}`") };
        if row.len() != 4 {
            return Err(VfError::RowParseError { line, message: format!("expected 4 fields, found {}", row.len()) });
        }
        let segment_index = row[0].parse().map_err(|_| bad("segment", &row[0]))?;
        let f_c = row[1].parse().map_err(|_| bad("f_c", &row[1]))?;
        let f_s = row[2].parse().map_err(|_| bad("f_s", &row[2]))?;
        let f_iat = match &row[3] {
            "NA" => None,
            v => Some(v.parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0).ok_or_else(|| bad("f_iat", v))?),
        };
        out.push(SegmentFeatures { segment_index, f_c, f_s, f_iat });
    }
    Ok(out)
}
