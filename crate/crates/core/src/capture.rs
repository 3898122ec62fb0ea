//! Capture files: classic pcap (both byte orders, µs and ns) and the JSON-lines
//! trace format, read as a stream of UDP port-123 datagrams.
//!
//! JSONL schema, one object per line:
//! `{"ts_sec": i64, "ts_nsec": u32, "src": ip, "dst": ip, "sport": u16, "dport": u16, "payload_hex": str}`

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Registry;

pub const NTP_PORT: u16 = 123;

const PCAP_MAGIC_US: u32 = 0xa1b2_c3d4;
const PCAP_MAGIC_NS: u32 = 0xa1b2_3c4d;
const MAX_RECORD_LEN: u32 = 64 * 1024 * 1024;

const LINKTYPE_NULL: u32 = 0;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_LINUX_SLL: u32 = 113;
const LINKTYPE_IPV4: u32 = 228;
const LINKTYPE_IPV6: u32 = 229;
const LINKTYPE_LINUX_SLL2: u32 = 276;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a pcap or JSONL trace (magic {0:#010x})")]
    BadMagic(u32),
    #[error("corrupt record header at record {0}")]
    CorruptRecordHeader(u64),
    #[error("bad JSONL record at line {line}: {message}")]
    BadJsonLine { line: u64, message: String },
}

/// Capture-clock time normalized to (seconds, nanoseconds) since the Unix epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptureTime {
    pub secs: i64,
    pub nanos: u32,
}

impl CaptureTime {
    pub fn from_unix_nanos(nanos: i128) -> Self {
        Self {
            secs: nanos.div_euclid(1_000_000_000) as i64,
            nanos: nanos.rem_euclid(1_000_000_000) as u32,
        }
    }

    pub fn as_unix_nanos(self) -> i128 {
        self.secs as i128 * 1_000_000_000 + self.nanos as i128
    }

    pub fn as_secs_f64(self) -> f64 {
        self.secs as f64 + self.nanos as f64 * 1e-9
    }

    /// Truncated to whole microseconds, as stored by µs-resolution pcap.
    pub fn truncate_micros(self) -> Self {
        Self {
            secs: self.secs,
            nanos: self.nanos / 1000 * 1000,
        }
    }
}

/// One captured UDP datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub capture_ts: CaptureTime,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub sport: u16,
    pub dport: u16,
    pub payload: Vec<u8>,
}

impl CaptureRecord {
    pub fn is_ntp(&self) -> bool {
        self.sport == NTP_PORT || self.dport == NTP_PORT
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CaptureStats {
    pub total: u64,
    pub yielded: u64,
    pub non_udp: u64,
    pub fragments: u64,
    pub non_ntp_port: u64,
    pub malformed: u64,
    pub unsupported_link: u64,
}

impl CaptureStats {
    fn count_skip(&mut self, skip: Skip) {
        match skip {
            Skip::NonUdp => self.non_udp += 1,
            Skip::Fragment => self.fragments += 1,
            Skip::Malformed => self.malformed += 1,
            Skip::UnsupportedLink => self.unsupported_link += 1,
        }
    }

    pub fn skipped(&self) -> u64 {
        self.non_udp + self.fragments + self.non_ntp_port + self.malformed + self.unsupported_link
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    ts_sec: i64,
    ts_nsec: u32,
    src: IpAddr,
    dst: IpAddr,
    sport: u16,
    dport: u16,
    payload_hex: String,
}

impl From<&CaptureRecord> for JsonRecord {
    fn from(r: &CaptureRecord) -> Self {
        Self {
            ts_sec: r.capture_ts.secs,
            ts_nsec: r.capture_ts.nanos,
            src: r.src,
            dst: r.dst,
            sport: r.sport,
            dport: r.dport,
            payload_hex: hex::encode(&r.payload),
        }
    }
}

#[derive(Clone, Copy)]
struct PcapHeader {
    big_endian: bool,
    nanos: bool,
    linktype: u32,
}

impl PcapHeader {
    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }
}

enum Source<R> {
    Pcap { reader: R, header: PcapHeader },
    Jsonl { lines: io::Lines<BufReader<R>>, line_no: u64 },
}

/// Streaming reader over a capture. Yields NTP datagrams in file order; a
/// stream error ends iteration after everything before it was yielded.
pub struct CaptureReader<R> {
    source: Source<R>,
    stats: CaptureStats,
    done: bool,
}

/// Open `path` as pcap or JSONL, detected from the first bytes.
pub fn read_capture(path: impl AsRef<Path>) -> Result<CaptureReader<BufReader<File>>, CaptureError> {
    CaptureReader::new(BufReader::new(File::open(path)?))
}

impl<R: BufRead> CaptureReader<R> {
    pub fn new(mut reader: R) -> Result<Self, CaptureError> {
        let head = reader.fill_buf()?;
        let first_non_ws = head.iter().find(|b| !b.is_ascii_whitespace()).copied();
        if head.is_empty() || first_non_ws == Some(b'{') || (first_non_ws.is_none() && head.len() < 4) {
            return Ok(Self {
                source: Source::Jsonl {
                    lines: BufReader::new(reader).lines(),
                    line_no: 0,
                },
                stats: CaptureStats::default(),
                done: false,
            });
        }
        let mut gh = [0u8; 24];
        reader.read_exact(&mut gh).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CaptureError::BadMagic(0),
            _ => CaptureError::Io(e),
        })?;
        let le = u32::from_le_bytes([gh[0], gh[1], gh[2], gh[3]]);
        let be = u32::from_be_bytes([gh[0], gh[1], gh[2], gh[3]]);
        let (big_endian, nanos) = match (le, be) {
            (PCAP_MAGIC_US, _) => (false, false),
            (PCAP_MAGIC_NS, _) => (false, true),
            (_, PCAP_MAGIC_US) => (true, false),
            (_, PCAP_MAGIC_NS) => (true, true),
            _ => return Err(CaptureError::BadMagic(le)),
        };
        let mut header = PcapHeader { big_endian, nanos, linktype: 0 };
        header.linktype = header.u32(&gh[20..24]) & 0x0FFF_FFFF;
        Ok(Self {
            source: Source::Pcap { reader, header },
            stats: CaptureStats::default(),
            done: false,
        })
    }
}

impl<R> CaptureReader<R> {
    pub fn stats(&self) -> CaptureStats {
        self.stats
    }
}

impl<R: Read> CaptureReader<R> {
    fn next_pcap(&mut self) -> Option<Result<CaptureRecord, CaptureError>> {
        let Self { source, stats, .. } = self;
        let Source::Pcap { reader, header } = source else {
            unreachable!()
        };
        let header = *header;
        loop {
            let mut rh = [0u8; 16];
            match read_full(reader, &mut rh) {
                Ok(0) => return None,
                Ok(16) => {}
                Ok(_) => return Some(Err(CaptureError::CorruptRecordHeader(stats.total))),
                Err(e) => return Some(Err(e.into())),
            }
            let ts_sec = header.u32(&rh[0..4]);
            let ts_sub = header.u32(&rh[4..8]);
            let incl = header.u32(&rh[8..12]);
            let sub_limit = if header.nanos { 1_000_000_000 } else { 1_000_000 };
            if incl > MAX_RECORD_LEN || ts_sub >= sub_limit {
                return Some(Err(CaptureError::CorruptRecordHeader(stats.total)));
            }
            let mut data = vec![0u8; incl as usize];
            match read_full(reader, &mut data) {
                Ok(n) if n == data.len() => {}
                Ok(_) => return Some(Err(CaptureError::CorruptRecordHeader(stats.total))),
                Err(e) => return Some(Err(e.into())),
            }
            stats.total += 1;
            let capture_ts = CaptureTime {
                secs: ts_sec as i64,
                nanos: if header.nanos { ts_sub } else { ts_sub * 1000 },
            };
            match parse_link(header.linktype, &data) {
                Ok(udp) => {
                    let rec = CaptureRecord {
                        capture_ts,
                        src: udp.src,
                        dst: udp.dst,
                        sport: udp.sport,
                        dport: udp.dport,
                        payload: udp.payload.to_vec(),
                    };
                    if rec.is_ntp() {
                        stats.yielded += 1;
                        return Some(Ok(rec));
                    }
                    stats.non_ntp_port += 1;
                }
                Err(skip) => stats.count_skip(skip),
            }
        }
    }
}

impl<R: Read> CaptureReader<R> {
    fn next_jsonl(&mut self) -> Option<Result<CaptureRecord, CaptureError>> {
        let Self { source, stats, .. } = self;
        let Source::Jsonl { lines, line_no } = source else {
            unreachable!()
        };
        loop {
            let line = match lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            *line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = *line_no;
            let parsed = serde_json::from_str::<JsonRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(|j| {
                    let payload = hex::decode(&j.payload_hex).map_err(|e| e.to_string())?;
                    if j.ts_nsec >= 1_000_000_000 {
                        return Err("ts_nsec out of range".to_string());
                    }
                    Ok(CaptureRecord {
                        capture_ts: CaptureTime { secs: j.ts_sec, nanos: j.ts_nsec },
                        src: j.src,
                        dst: j.dst,
                        sport: j.sport,
                        dport: j.dport,
                        payload,
                    })
                });
            let rec = match parsed {
                Ok(r) => r,
                Err(message) => return Some(Err(CaptureError::BadJsonLine { line: line_no, message })),
            };
            stats.total += 1;
            if rec.is_ntp() {
                stats.yielded += 1;
                return Some(Ok(rec));
            }
            stats.non_ntp_port += 1;
        }
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<CaptureRecord, CaptureError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.source {
            Source::Pcap { .. } => self.next_pcap(),
            Source::Jsonl { .. } => self.next_jsonl(),
        };
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Skip {
    NonUdp,
    Fragment,
    Malformed,
    UnsupportedLink,
}

struct UdpView<'a> {
    src: IpAddr,
    dst: IpAddr,
    sport: u16,
    dport: u16,
    payload: &'a [u8],
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn parse_link(linktype: u32, data: &[u8]) -> Result<UdpView<'_>, Skip> {
    match linktype {
        LINKTYPE_ETHERNET => {
            if data.len() < 14 {
                return Err(Skip::Malformed);
            }
            let mut at = 12;
            let mut ethertype = be16(data, at);
            while ethertype == 0x8100 || ethertype == 0x88a8 {
                at += 4;
                if data.len() < at + 2 {
                    return Err(Skip::Malformed);
                }
                ethertype = be16(data, at);
            }
            parse_ethertype(ethertype, &data[at + 2..])
        }
        LINKTYPE_LINUX_SLL => {
            if data.len() < 16 {
                return Err(Skip::Malformed);
            }
            parse_ethertype(be16(data, 14), &data[16..])
        }
        LINKTYPE_LINUX_SLL2 => {
            if data.len() < 20 {
                return Err(Skip::Malformed);
            }
            parse_ethertype(be16(data, 0), &data[20..])
        }
        LINKTYPE_NULL => {
            if data.len() < 4 {
                return Err(Skip::Malformed);
            }
            // Address family in host byte order of the capturing machine.
            let fam_le = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
            let fam_be = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
            match (fam_le, fam_be) {
                (2, _) | (_, 2) => parse_ipv4(&data[4..]),
                (24 | 28 | 30, _) | (_, 24 | 28 | 30) => parse_ipv6(&data[4..]),
                _ => Err(Skip::NonUdp),
            }
        }
        LINKTYPE_RAW | LINKTYPE_IPV4 | LINKTYPE_IPV6 | 12 | 14 => match data.first().map(|b| b >> 4) {
            Some(4) => parse_ipv4(data),
            Some(6) => parse_ipv6(data),
            _ => Err(Skip::Malformed),
        },
        _ => Err(Skip::UnsupportedLink),
    }
}

fn parse_ethertype(ethertype: u16, data: &[u8]) -> Result<UdpView<'_>, Skip> {
    match ethertype {
        0x0800 => parse_ipv4(data),
        0x86DD => parse_ipv6(data),
        _ => Err(Skip::NonUdp),
    }
}

fn parse_ipv4(data: &[u8]) -> Result<UdpView<'_>, Skip> {
    if data.len() < 20 || data[0] >> 4 != 4 {
        return Err(Skip::Malformed);
    }
    let ihl = (data[0] & 0x0F) as usize * 4;
    let total = be16(data, 2) as usize;
    if ihl < 20 || total < ihl || data.len() < ihl {
        return Err(Skip::Malformed);
    }
    let flags_frag = be16(data, 6);
    if flags_frag & 0x2000 != 0 || flags_frag & 0x1FFF != 0 {
        return Err(Skip::Fragment);
    }
    if data[9] != 17 {
        return Err(Skip::NonUdp);
    }
    let src = IpAddr::V4(Ipv4Addr::new(data[12], data[13], data[14], data[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(data[16], data[17], data[18], data[19]));
    let end = total.min(data.len());
    parse_udp(src, dst, &data[ihl..end])
}

fn parse_ipv6(data: &[u8]) -> Result<UdpView<'_>, Skip> {
    if data.len() < 40 || data[0] >> 4 != 6 {
        return Err(Skip::Malformed);
    }
    let payload_len = be16(data, 4) as usize;
    let mut next = data[6];
    let src = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&data[8..24]).unwrap()));
    let dst = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&data[24..40]).unwrap()));
    let end = (40 + payload_len).min(data.len());
    let mut at = 40;
    loop {
        match next {
            17 => return parse_udp(src, dst, &data[at.min(end)..end]),
            44 => return Err(Skip::Fragment),
            0 => {
                if end < at + 8 {
                    return Err(Skip::Malformed);
                }
                next = data[at];
                at += (data[at + 1] as usize + 1) * 8;
            }
            _ => return Err(Skip::NonUdp),
        }
    }
}

fn parse_udp(src: IpAddr, dst: IpAddr, data: &[u8]) -> Result<UdpView<'_>, Skip> {
    if data.len() < 8 {
        return Err(Skip::Malformed);
    }
    let len = be16(data, 4) as usize;
    if len < 8 {
        return Err(Skip::Malformed);
    }
    let end = len.min(data.len());
    Ok(UdpView {
        src,
        dst,
        sport: be16(data, 0),
        dport: be16(data, 2),
        payload: &data[8..end],
    })
}

/// Output format for a synthesized or filtered trace.
pub trait TraceWriter: Send + Sync {
    fn extension(&self) -> &'static str;
    fn write_trace(&self, records: &[CaptureRecord], out: &mut dyn Write) -> io::Result<()>;
}

pub struct JsonlWriter;

impl TraceWriter for JsonlWriter {
    fn extension(&self) -> &'static str {
        "jsonl"
    }

    fn write_trace(&self, records: &[CaptureRecord], out: &mut dyn Write) -> io::Result<()> {
        for r in records {
            serde_json::to_writer(&mut *out, &JsonRecord::from(r))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Little-endian, microsecond-resolution pcap with Ethernet framing.
pub struct PcapWriter;

impl TraceWriter for PcapWriter {
    fn extension(&self) -> &'static str {
        "pcap"
    }

    fn write_trace(&self, records: &[CaptureRecord], out: &mut dyn Write) -> io::Result<()> {
        let mut gh = Vec::with_capacity(24);
        gh.extend_from_slice(&PCAP_MAGIC_US.to_le_bytes());
        gh.extend_from_slice(&2u16.to_le_bytes());
        gh.extend_from_slice(&4u16.to_le_bytes());
        gh.extend_from_slice(&0i32.to_le_bytes());
        gh.extend_from_slice(&0u32.to_le_bytes());
        gh.extend_from_slice(&65_535u32.to_le_bytes());
        gh.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        out.write_all(&gh)?;
        for r in records {
            let frame = ethernet_frame(r);
            let secs = u32::try_from(r.capture_ts.secs)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "timestamp outside pcap range"))?;
            out.write_all(&secs.to_le_bytes())?;
            out.write_all(&(r.capture_ts.nanos / 1000).to_le_bytes())?;
            out.write_all(&(frame.len() as u32).to_le_bytes())?;
            out.write_all(&(frame.len() as u32).to_le_bytes())?;
            out.write_all(&frame)?;
        }
        Ok(())
    }
}

pub fn trace_writers() -> Registry<dyn TraceWriter> {
    let mut reg: Registry<dyn TraceWriter> = Registry::new("trace format");
    reg.register("pcap", Box::new(PcapWriter));
    reg.register("jsonl", Box::new(JsonlWriter));
    reg
}

fn checksum_fold(mut sum: u32) -> u16 {
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn sum_words(bytes: &[u8]) -> u32 {
    bytes
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum()
}

fn ethernet_frame(r: &CaptureRecord) -> Vec<u8> {
    let udp_len = 8 + r.payload.len();
    let mut udp = Vec::with_capacity(udp_len);
    udp.extend_from_slice(&r.sport.to_be_bytes());
    udp.extend_from_slice(&r.dport.to_be_bytes());
    udp.extend_from_slice(&(udp_len as u16).to_be_bytes());
    udp.extend_from_slice(&[0, 0]);
    udp.extend_from_slice(&r.payload);

    let mut frame = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01];
    match (r.src, r.dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let mut pseudo = Vec::with_capacity(12);
            pseudo.extend_from_slice(&s.octets());
            pseudo.extend_from_slice(&d.octets());
            pseudo.extend_from_slice(&[0, 17]);
            pseudo.extend_from_slice(&(udp_len as u16).to_be_bytes());
            let ck = checksum_fold(sum_words(&pseudo) + sum_words(&udp));
            udp[6..8].copy_from_slice(&(if ck == 0 { 0xFFFF } else { ck }).to_be_bytes());

            frame.extend_from_slice(&0x0800u16.to_be_bytes());
            let mut ip = vec![0x45, 0];
            ip.extend_from_slice(&((20 + udp_len) as u16).to_be_bytes());
            ip.extend_from_slice(&[0, 0, 0x40, 0, 64, 17, 0, 0]);
            ip.extend_from_slice(&s.octets());
            ip.extend_from_slice(&d.octets());
            let ck = checksum_fold(sum_words(&ip));
            ip[10..12].copy_from_slice(&ck.to_be_bytes());
            frame.extend_from_slice(&ip);
        }
        (s, d) => {
            let s = to_v6(s);
            let d = to_v6(d);
            let mut pseudo = Vec::with_capacity(40);
            pseudo.extend_from_slice(&s.octets());
            pseudo.extend_from_slice(&d.octets());
            pseudo.extend_from_slice(&(udp_len as u32).to_be_bytes());
            pseudo.extend_from_slice(&[0, 0, 0, 17]);
            let ck = checksum_fold(sum_words(&pseudo) + sum_words(&udp));
            udp[6..8].copy_from_slice(&(if ck == 0 { 0xFFFF } else { ck }).to_be_bytes());

            frame.extend_from_slice(&0x86DDu16.to_be_bytes());
            frame.extend_from_slice(&[0x60, 0, 0, 0]);
            frame.extend_from_slice(&(udp_len as u16).to_be_bytes());
            frame.extend_from_slice(&[17, 64]);
            frame.extend_from_slice(&s.octets());
            frame.extend_from_slice(&d.octets());
        }
    }
    frame.extend_from_slice(&udp);
    frame
}

fn to_v6(a: IpAddr) -> Ipv6Addr {
    match a {
        IpAddr::V4(v4) => v4.to_ipv6_mapped(),
        IpAddr::V6(v6) => v6,
    }
}
