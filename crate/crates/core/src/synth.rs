//! Seeded synthetic fixtures: XR-like packet traces with planted frames, a
//! pcap writer for them, and feature series with trend, seasonality and
//! positive spikes.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{micros_to_secs, Direction, PacketRecord, PCAP_MAGIC_USEC};
use crate::prep::{Feature, TimeSeries};
use crate::viewframe::Frame;

/// Ethernet + IPv4 + UDP header bytes; the smallest packet the pcap writer
/// can represent.
pub const MIN_PACKET_LEN: u32 = 42;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(SynthError::BadSpec(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        bad(format!("{name} must be positive, got {v}"))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        bad(format!("{name} must be non-negative, got {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSpec {
    pub fps: f64,
    /// Seconds.
    pub duration: f64,
    /// Bytes per frame, before size variation.
    pub mean_frame_size: f64,
    pub packets_per_frame: usize,
    /// Seconds between packets of one frame.
    pub intra_spacing: f64,
    /// Background packets per second, both directions.
    pub background_rate: f64,
    pub background_size: u32,
    /// Standard deviation of frame start times around the `1/fps` grid, seconds.
    pub jitter_std: f64,
    /// Standard deviation of frame sizes as a fraction of the mean.
    pub size_variation: f64,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            fps: 72.0,
            duration: 10.0,
            mean_frame_size: 12_000.0,
            packets_per_frame: 8,
            intra_spacing: 50e-6,
            background_rate: 0.0,
            background_size: 80,
            jitter_std: 0.0,
            size_variation: 0.0,
            seed: 0,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        positive("fps", self.fps)?;
        positive("duration", self.duration)?;
        positive("mean_frame_size", self.mean_frame_size)?;
        positive("intra_spacing", self.intra_spacing)?;
        non_negative("background_rate", self.background_rate)?;
        non_negative("jitter_std", self.jitter_std)?;
        non_negative("size_variation", self.size_variation)?;
        if self.packets_per_frame == 0 {
            return bad("packets_per_frame must be at least 1");
        }
        if self.background_size < MIN_PACKET_LEN {
            return bad(format!("background_size must be at least {MIN_PACKET_LEN}"));
        }
        if self.mean_frame_size / (self.packets_per_frame as f64) < f64::from(MIN_PACKET_LEN) {
            return bad("mean frame size too small for packets_per_frame");
        }
        if (self.packets_per_frame - 1) as f64 * self.intra_spacing >= 1.0 / self.fps {
            return bad("frame burst is longer than the frame interval");
        }
        Ok(())
    }

    /// Number of frames planted: `floor(fps * duration)`.
    pub fn frame_count(&self) -> usize {
        (self.fps * self.duration + 1e-9).floor() as usize
    }
}

/// Generated packets plus the frames planted in them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub packets: Vec<PacketRecord>,
    pub frames: Vec<Frame>,
}

fn to_us(secs: f64) -> i64 {
    (secs * 1e6).round() as i64
}

/// Downlink frame bursts on a `1/fps` grid with optional background traffic.
/// Timestamps are whole microseconds, re-based to the first packet.
pub fn gen_trace(spec: &TraceSpec) -> Result<SyntheticTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter_std).expect("validated std");
    let size_noise = Normal::new(0.0, spec.size_variation).expect("validated std");
    let ppf = spec.packets_per_frame;
    let spacing_us = to_us(spec.intra_spacing).max(1);

    // (timestamp us, length, direction, planted frame)
    let mut raw: Vec<(i64, u32, Direction, Option<usize>)> = Vec::new();
    let mut planted: Vec<(i64, i64, u64)> = Vec::new();
    for k in 0..spec.frame_count() {
        let start = to_us(k as f64 / spec.fps + jitter.sample(&mut rng));
        let factor = (1.0 + size_noise.sample(&mut rng)).max(0.1);
        let size = ((spec.mean_frame_size * factor).round() as u64).max(u64::from(MIN_PACKET_LEN) * ppf as u64);
        let base = size / ppf as u64;
        let extra = size % ppf as u64;
        for j in 0..ppf {
            // remainder bytes go to the first packets, one each
            let len = base + u64::from((j as u64) < extra);
            raw.push((start + j as i64 * spacing_us, len as u32, Direction::Downlink, Some(k)));
        }
        planted.push((start, start + (ppf as i64 - 1) * spacing_us, size));
    }

    if spec.background_rate > 0.0 {
        let gaps = Exp::new(spec.background_rate).expect("validated rate");
        let mut t = gaps.sample(&mut rng);
        while t < spec.duration {
            let dir = if rng.random_bool(0.5) { Direction::Downlink } else { Direction::Uplink };
            raw.push((to_us(t), spec.background_size, dir, None));
            t += gaps.sample(&mut rng);
        }
    }

    raw.sort_by_key(|r| (r.0, r.3.is_none(), r.3));
    let origin = raw.first().map_or(0, |r| r.0);
    let secs = |us: i64| micros_to_secs((us - origin) as u64);
    let packets = raw
        .iter()
        .map(|&(us, length, direction, _)| PacketRecord { ts: secs(us), length, direction })
        .collect();
    let frames = planted
        .iter()
        .map(|&(s, e, size)| Frame { start_ts: secs(s), end_ts: secs(e), size, packet_count: ppf })
        .collect();
    Ok(SyntheticTrace { packets, frames })
}

/// Addresses used when writing a trace to pcap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapEndpoints {
    pub server: Ipv4Addr,
    pub client: Ipv4Addr,
    pub server_port: u16,
    pub client_port: u16,
}

impl Default for PcapEndpoints {
    fn default() -> Self {
        Self {
            server: Ipv4Addr::new(10, 0, 0, 1),
            client: Ipv4Addr::new(10, 0, 0, 2),
            server_port: 9000,
            client_port: 50_000,
        }
    }
}

/// Serialize packets as a little-endian microsecond pcap of Ethernet/IPv4/UDP
/// frames, each padded to its recorded length.
pub fn write_pcap(packets: &[PacketRecord], ep: &PcapEndpoints) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + packets.iter().map(|p| 16 + p.length as usize).sum::<usize>());
    out.extend_from_slice(&PCAP_MAGIC_USEC.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65_535u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());

    for p in packets {
        if p.length < MIN_PACKET_LEN {
            return bad(format!("packet length {} below {MIN_PACKET_LEN}", p.length));
        }
        if !(p.ts >= 0.0) {
            return bad(format!("negative timestamp {}", p.ts));
        }
        let us = to_us(p.ts) as u64;
        out.extend_from_slice(&((us / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((us % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&p.length.to_le_bytes());
        out.extend_from_slice(&p.length.to_le_bytes());

        let (src, dst, sport, dport) = match p.direction {
            Direction::Downlink => (ep.server, ep.client, ep.server_port, ep.client_port),
            Direction::Uplink => (ep.client, ep.server, ep.client_port, ep.server_port),
        };
        let start = out.len();
        out.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
        out.extend_from_slice(&0x0800u16.to_be_bytes());
        let ip_len = (p.length - 14) as u16;
        out.extend_from_slice(&[0x45, 0]);
        out.extend_from_slice(&ip_len.to_be_bytes());
        out.extend_from_slice(&[0, 0, 0x40, 0, 64, 17, 0, 0]);
        out.extend_from_slice(&src.octets());
        out.extend_from_slice(&dst.octets());
        out.extend_from_slice(&sport.to_be_bytes());
        out.extend_from_slice(&dport.to_be_bytes());
        out.extend_from_slice(&(ip_len - 20).to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        out.resize(start + p.length as usize, 0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesSpec {
    pub length: usize,
    pub level: f64,
    pub amplitude: f64,
    /// Samples per seasonal cycle.
    pub period: f64,
    /// Change per sample.
    pub slope: f64,
    pub noise_std: f64,
    /// Probability that a spike starts at a given sample.
    pub spike_rate: f64,
    pub spike_height: f64,
    /// Fraction of a spike carried into the next sample, in `[0, 1)`.
    pub spike_decay: f64,
    /// Samples between periodic spikes (I-frame like); 0 disables them.
    pub spike_period: usize,
    pub seed: u64,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        Self {
            length: 2000,
            level: 100.0,
            amplitude: 20.0,
            period: 50.0,
            slope: 0.0,
            noise_std: 2.0,
            spike_rate: 0.0,
            spike_height: 0.0,
            spike_decay: 0.0,
            spike_period: 0,
            seed: 0,
        }
    }
}

impl SeriesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return bad("length must be at least 1");
        }
        positive("period", self.period)?;
        non_negative("amplitude", self.amplitude)?;
        non_negative("noise_std", self.noise_std)?;
        non_negative("spike_height", self.spike_height)?;
        for (name, v) in [("level", self.level), ("slope", self.slope)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return bad("spike_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.spike_decay) {
            return bad("spike_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// The additive parts of a generated series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesComponents {
    pub seasonal: Vec<f64>,
    pub trend: Vec<f64>,
    pub noise: Vec<f64>,
    pub spikes: Vec<f64>,
}

/// `level + amplitude*sin(2*pi*t/period) + slope*t + noise + spikes`.
///
/// Spikes start at random (`spike_rate`) and/or every `spike_period`
/// samples, with heights drawn from `spike_height * U(0.5, 1.5)`.
pub fn gen_series(spec: &SeriesSpec, feature: Feature) -> Result<(TimeSeries, SeriesComponents)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
    let n = spec.length;
    let seasonal: Vec<f64> = (0..n)
        .map(|t| spec.amplitude * (std::f64::consts::TAU * t as f64 / spec.period).sin())
        .collect();
    let trend: Vec<f64> = (0..n).map(|t| spec.slope * t as f64).collect();
    let mut noise = vec![0.0; n];
    let mut spikes = vec![0.0; n];
    let mut carry = 0.0;
    for t in 0..n {
        if spec.noise_std > 0.0 {
            noise[t] = normal.sample(&mut rng);
        }
        carry *= spec.spike_decay;
        let periodic = spec.spike_period > 0 && t % spec.spike_period == spec.spike_period - 1;
        if periodic || (spec.spike_rate > 0.0 && rng.random_bool(spec.spike_rate)) {
            carry += spec.spike_height * rng.random_range(0.5..1.5);
        }
        spikes[t] = carry;
    }
    let values: Vec<f64> = (0..n).map(|t| spec.level + seasonal[t] + trend[t] + noise[t] + spikes[t]).collect();
    let series = TimeSeries::new(values, feature).map_err(|e| SynthError::BadSpec(e.to_string()))?;
    Ok((series, SeriesComponents { seasonal, trend, noise, spikes }))
}
