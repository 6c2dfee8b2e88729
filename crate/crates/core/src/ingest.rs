//! Packet trace ingestion.
//!
//! Reads classic pcap captures (Ethernet/IPv4/TCP|UDP) and the plain
//! `ts,length,direction` CSV trace format into a normalized packet stream.
//! Timestamps are re-based so the first kept packet sits at `0.0` seconds.
//!
//! Packet length is the captured length (`incl_len`) of each record.

use std::fmt;
use std::io::Read;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microsecond-resolution pcap magic.
pub const PCAP_MAGIC_USEC: u32 = 0xa1b2_c3d4;
/// Nanosecond-resolution pcap magic.
pub const PCAP_MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const PCAPNG_MAGIC: u32 = 0x0a0d_0d0a;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const LINKTYPE_ETHERNET: u32 = 1;
const ETHERTYPE_IPV4: u16 = 0x0800;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

/// Header line of the CSV trace format.
pub const CSV_HEADER: &str = "ts,length,direction";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("stream holds {0} bytes, shorter than the 24-byte pcap global header")]
    TruncatedHeader(usize),
    #[error("pcapng captures are not supported, export as classic pcap (magic {0:#010x})")]
    PcapNg(u32),
    #[error("unknown pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported link type {0}, only Ethernet (1) is handled")]
    UnsupportedLinkType(u32),
    #[error("invalid endpoint filter: {0}")]
    BadFilter(String),
    #[error("expected CSV header `{CSV_HEADER}`, found `{0}`")]
    SchemaMismatch(String),
    #[error("line {line}: {message}")]
    RowParseError { line: u64, message: String },
    #[error("trace holds no packets")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Direction relative to the rendering server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uplink => "up",
            Direction::Downlink => "down",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "up" => Ok(Direction::Uplink),
            "down" => Ok(Direction::Downlink),
            other => Err(format!("direction must be `up` or `down`, got `{other}`")),
        }
    }
}

/// One captured packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Seconds since the first packet of the trace.
    pub ts: f64,
    /// Captured length in bytes, always >= 1.
    pub length: u32,
    pub direction: Direction,
}

/// Selects the server side of a capture; direction is resolved against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointFilter {
    pub server_address: Ipv4Addr,
    pub port: Option<u16>,
}

impl EndpointFilter {
    pub fn new(server_address: &str, port: Option<u32>) -> Result<Self> {
        let server_address = server_address
            .parse::<Ipv4Addr>()
            .map_err(|_| IngestError::BadFilter(format!("`{server_address}` is not a dotted quad")))?;
        let port = match port {
            None => None,
            Some(p) => Some(
                u16::try_from(p)
                    .map_err(|_| IngestError::BadFilter(format!("port {p} out of range 0-65535")))?,
            ),
        };
        Ok(Self { server_address, port })
    }

    /// Direction of a packet between `src` and `dst`, or `None` if it does not
    /// touch the server endpoint.
    fn classify(&self, src: Ipv4Addr, dst: Ipv4Addr, ports: Option<(u16, u16)>) -> Option<Direction> {
        let port_ok = |which: fn((u16, u16)) -> u16| match (self.port, ports) {
            (None, _) => true,
            (Some(p), Some(pp)) => which(pp) == p,
            (Some(_), None) => false,
        };
        if src == self.server_address && port_ok(|pp| pp.0) {
            Some(Direction::Downlink)
        } else if dst == self.server_address && port_ok(|pp| pp.1) {
            Some(Direction::Uplink)
        } else {
            None
        }
    }
}

/// Outcome of a pcap parse that did not hit a hard error.
#[derive(Debug, Clone, Default)]
pub struct PcapTrace {
    pub packets: Vec<PacketRecord>,
    /// Records that were not IPv4 TCP/UDP or did not match the filter.
    pub skipped: usize,
    /// Set when a record header promised more bytes than remained; parsing
    /// stopped there.
    pub truncated_at_record: Option<usize>,
}

impl PcapTrace {
    pub fn warning_count(&self) -> usize {
        usize::from(self.truncated_at_record.is_some())
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(arr),
            Endian::Big => u32::from_be_bytes(arr),
        }
    }
}

/// Parse a classic pcap capture held in memory.
pub fn parse_pcap(bytes: &[u8], filter: &EndpointFilter) -> Result<PcapTrace> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::TruncatedHeader(bytes.len()));
    }
    let raw_magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, subsec_scale) = match raw_magic {
        PCAP_MAGIC_USEC => (Endian::Little, 1_000u64),
        PCAP_MAGIC_NSEC => (Endian::Little, 1u64),
        m if m.swap_bytes() == PCAP_MAGIC_USEC => (Endian::Big, 1_000),
        m if m.swap_bytes() == PCAP_MAGIC_NSEC => (Endian::Big, 1),
        PCAPNG_MAGIC => return Err(IngestError::PcapNg(raw_magic)),
        m => return Err(IngestError::BadMagic(m)),
    };
    let network = endian.u32(&bytes[20..24]);
    if network != LINKTYPE_ETHERNET {
        return Err(IngestError::UnsupportedLinkType(network));
    }

    let mut out = PcapTrace::default();
    // absolute timestamps in nanoseconds, re-based after the scan
    let mut stamped: Vec<(u64, u32, Direction)> = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN;
    let mut index = 0usize;
    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            out.truncated_at_record = Some(index);
            break;
        }
        let hdr = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = u64::from(endian.u32(&hdr[0..4]));
        let ts_sub = u64::from(endian.u32(&hdr[4..8]));
        let incl_len = endian.u32(&hdr[8..12]) as usize;
        let body_start = offset + RECORD_HEADER_LEN;
        if bytes.len() - body_start < incl_len {
            out.truncated_at_record = Some(index);
            break;
        }
        let body = &bytes[body_start..body_start + incl_len];
        offset = body_start + incl_len;
        index += 1;

        match classify_frame(body, filter) {
            Some(direction) if incl_len > 0 => {
                let ns = ts_sec * 1_000_000_000 + ts_sub * subsec_scale;
                stamped.push((ns, incl_len as u32, direction));
            }
            _ => out.skipped += 1,
        }
    }
    if out.truncated_at_record.is_some() {
        log::warn!("pcap truncated after {} records", index);
    }

    stamped.sort_by_key(|s| s.0);
    if let Some(&(first, _, _)) = stamped.first() {
        out.packets = stamped
            .into_iter()
            .map(|(ns, length, direction)| PacketRecord {
                ts: nanos_to_secs(ns - first),
                length,
                direction,
            })
            .collect();
    }
    Ok(out)
}

/// Read and parse a pcap file from disk.
pub fn read_pcap_file(path: &std::path::Path, filter: &EndpointFilter) -> Result<PcapTrace> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_pcap(&buf, filter)
}

/// Converts an integer nanosecond offset to seconds.
///
/// Synthetic generators quantize through [`micros_to_secs`], which agrees with
/// this conversion bit for bit on whole microseconds.
pub fn nanos_to_secs(ns: u64) -> f64 {
    if ns % 1_000 == 0 {
        micros_to_secs(ns / 1_000)
    } else {
        ns as f64 / 1e9
    }
}

pub fn micros_to_secs(us: u64) -> f64 {
    us as f64 / 1e6
}

fn classify_frame(frame: &[u8], filter: &EndpointFilter) -> Option<Direction> {
    // Ethernet II without VLAN tags
    if frame.len() < 14 {
        return None;
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = &frame[14..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < 20 || ip.len() < ihl {
        return None;
    }
    let proto = ip[9];
    if proto != IPPROTO_TCP && proto != IPPROTO_UDP {
        return None;
    }
    let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let l4 = &ip[ihl..];
    let ports = (l4.len() >= 4).then(|| {
        (
            u16::from_be_bytes([l4[0], l4[1]]),
            u16::from_be_bytes([l4[2], l4[3]]),
        )
    });
    filter.classify(src, dst, ports)
}

/// Parse the CSV trace format. Timestamps are re-based to the first row.
pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<PacketRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let joined = headers.iter().collect::<Vec<_>>().join(",");
    if joined != CSV_HEADER {
        return Err(IngestError::SchemaMismatch(joined));
    }

    let mut out: Vec<PacketRecord> = Vec::new();
    let mut first_ts = None;
    let mut prev_ts = f64::NEG_INFINITY;
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| IngestError::RowParseError { line, message };
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", row.len())));
        }
        let ts: f64 = row[0]
            .parse()
            .map_err(|_| bad(format!("bad timestamp `{}`", &row[0])))?;
        if !ts.is_finite() {
            return Err(bad(format!("non-finite timestamp `{}`", &row[0])));
        }
        let length: u32 = row[1]
            .parse()
            .map_err(|_| bad(format!("bad length `{}`", &row[1])))?;
        if length == 0 {
            return Err(bad("length must be at least 1".into()));
        }
        let direction: Direction = row[2].parse().map_err(bad)?;
        if ts < prev_ts {
            return Err(bad(format!("timestamp {ts} goes backwards")));
        }
        prev_ts = ts;
        let base = *first_ts.get_or_insert(ts);
        out.push(PacketRecord { ts: ts - base, length, direction });
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::RowParseError { line, message: format!("{other:?}") },
    }
}

/// Render packets in the CSV trace format (LF line endings).
pub fn emit_csv(packets: &[PacketRecord]) -> String {
    let mut s = String::with_capacity(16 + packets.len() * 24);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for p in packets {
        // `{}` on f64 prints the shortest string that parses back to the same value
        s.push_str(&format!("{},{},{}\n", p.ts, p.length, p.direction));
    }
    s
}

/// Per-packet inter-arrival times; the first entry is 0.
pub fn inter_arrival(packets: &[PacketRecord]) -> Result<Vec<f64>> {
    if packets.is_empty() {
        return Err(IngestError::EmptyTrace);
    }
    let mut out = Vec::with_capacity(packets.len());
    out.push(0.0);
    out.extend(packets.windows(2).map(|w| (w[1].ts - w[0].ts).max(0.0)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> EndpointFilter {
        EndpointFilter::new("10.0.0.1", None).unwrap()
    }

    fn global_header(magic_le: [u8; 4], network: u32) -> Vec<u8> {
        let mut v = magic_le.to_vec();
        v.extend_from_slice(&2u16.to_le_bytes());
        v.extend_from_slice(&4u16.to_le_bytes());
        v.extend_from_slice(&0i32.to_le_bytes());
        v.extend_from_slice(&0u32.to_le_bytes());
        v.extend_from_slice(&65535u32.to_le_bytes());
        v.extend_from_slice(&network.to_le_bytes());
        v
    }

    #[test]
    fn empty_body_yields_no_packets() {
        let bytes = global_header(PCAP_MAGIC_USEC.to_le_bytes(), 1);
        let trace = parse_pcap(&bytes, &server()).unwrap();
        assert!(trace.packets.is_empty());
        assert_eq!(trace.skipped, 0);
        assert_eq!(trace.warning_count(), 0);
    }

    #[test]
    fn short_stream_is_truncated_header() {
        assert!(matches!(
            parse_pcap(&[0xd4, 0xc3, 0xb2], &server()),
            Err(IngestError::TruncatedHeader(3))
        ));
    }

    #[test]
    fn bad_magic_and_pcapng() {
        let bytes = global_header(0xdead_beefu32.to_le_bytes(), 1);
        assert!(matches!(parse_pcap(&bytes, &server()), Err(IngestError::BadMagic(0xdead_beef))));
        let ng = global_header(PCAPNG_MAGIC.to_le_bytes(), 1);
        let err = parse_pcap(&ng, &server()).unwrap_err();
        assert!(err.to_string().contains("pcapng"));
    }

    #[test]
    fn truncated_record_keeps_earlier_packets() {
        let mut bytes = global_header(PCAP_MAGIC_USEC.to_le_bytes(), 1);
        // record header claiming 100 bytes but only 10 present
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 10]);
        let trace = parse_pcap(&bytes, &server()).unwrap();
        assert_eq!(trace.truncated_at_record, Some(0));
        assert_eq!(trace.warning_count(), 1);
    }

    #[test]
    fn filter_validation() {
        assert!(EndpointFilter::new("10.0.0", None).is_err());
        assert!(EndpointFilter::new("10.0.0.1", Some(70_000)).is_err());
        assert_eq!(EndpointFilter::new("10.0.0.1", Some(443)).unwrap().port, Some(443));
    }

    #[test]
    fn csv_examples() {
        let text = "ts,length,direction\n1.0,1400,down\n1.002,900,down";
        let p = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], PacketRecord { ts: 0.0, length: 1400, direction: Direction::Downlink });
        assert_eq!(p[1].length, 900);
        assert!((p[1].ts - 0.002).abs() < 1e-12);

        assert!(matches!(parse_csv("time,len\n1,2".as_bytes()), Err(IngestError::SchemaMismatch(_))));

        let bad = "ts,length,direction\n0.0,100,up\n0.1,abc,up\n0.2,100,down\n";
        match parse_csv(bad.as_bytes()) {
            Err(IngestError::RowParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_accepts_crlf() {
        let text = "ts,length,direction\r\n0.5,10,up\r\n0.75,20,down\r\n";
        let p = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(p[1], PacketRecord { ts: 0.25, length: 20, direction: Direction::Downlink });
    }

    #[test]
    fn inter_arrival_examples() {
        let mk = |ts: f64| PacketRecord { ts, length: 1, direction: Direction::Downlink };
        let iat = inter_arrival(&[mk(0.0), mk(0.002), mk(0.010)]).unwrap();
        assert_eq!(iat[0], 0.0);
        assert!((iat[1] - 0.002).abs() < 1e-15);
        assert!((iat[2] - 0.008).abs() < 1e-15);
        assert_eq!(inter_arrival(&[mk(3.0)]).unwrap(), vec![0.0]);
        assert!(matches!(inter_arrival(&[]), Err(IngestError::EmptyTrace)));

        let uniform: Vec<_> = (0..1000).map(|i| mk(i as f64 * 0.001)).collect();
        let iat = inter_arrival(&uniform).unwrap();
        assert_eq!(iat.len(), 1000);
        assert!(iat[1..].iter().all(|d| (d - 0.001).abs() < 1e-12));
    }
}
