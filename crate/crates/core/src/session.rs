//! Per-(client, server) session reconstruction and raw OWD extraction.
//!
//! A request's c2s is `t1 - t0`: its transmit timestamp (client clock) against
//! its arrival at the server. Its s2c comes from timestamp rotation: the
//! request's origin field echoes the transmit timestamp of the server's
//! previous response, and its receive field is when the client got that
//! response, so `s2c = receive - echoed transmit`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::net::IpAddr;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::CaptureTime;
use crate::codec::{EraPivot, NtpPacket, NtpTime, NtpTimestamp};
use crate::tier::{PollingKind, Tier};

/// Version tag written on every sample line.
pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("server address set is empty")]
    NoServers,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad sample line {line}: {message}")]
    BadSampleLine { line: u64, message: String },
}

/// Where the server-side arrival time `t1` of a request comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum T1Source {
    /// Always the capture timestamp of the request.
    Capture,
    /// The matching response's receive timestamp when set, else the capture time.
    #[default]
    PreferServerReceive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub t1_source: T1Source,
    /// Recent responses (and pending requests) remembered per session.
    pub rotation_depth: usize,
    pub era_pivot: EraPivot,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            t1_source: T1Source::default(),
            rotation_depth: 4,
            era_pivot: EraPivot::default(),
        }
    }
}

/// Addresses of the capture servers with their ref-id encodings.
#[derive(Debug, Clone, Default)]
pub struct ServerSet {
    by_ref_id: HashMap<[u8; 4], IpAddr>,
    addrs: Vec<IpAddr>,
}

impl ServerSet {
    pub fn new(addrs: impl IntoIterator<Item = IpAddr>) -> Self {
        let mut set = ServerSet::default();
        for a in addrs {
            if set.addrs.contains(&a) {
                continue;
            }
            set.by_ref_id.entry(ref_id_for(a)).or_insert(a);
            set.addrs.push(a);
        }
        set
    }

    pub fn contains(&self, a: &IpAddr) -> bool {
        self.addrs.contains(a)
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn addrs(&self) -> &[IpAddr] {
        &self.addrs
    }

    pub fn match_ref_id(&self, ref_id: [u8; 4]) -> Option<IpAddr> {
        self.by_ref_id.get(&ref_id).copied()
    }
}

/// The ref-id a client puts in its requests once it has selected `addr`:
/// the IPv4 octets, or the first four bytes of the MD5 of an IPv6 address.
pub fn ref_id_for(addr: IpAddr) -> [u8; 4] {
    match addr {
        IpAddr::V4(v4) => v4.octets(),
        IpAddr::V6(v6) => {
            let digest = Md5::digest(v6.octets());
            [digest[0], digest[1], digest[2], digest[3]]
        }
    }
}

/// Client-reported round-trip estimate carried in a request's root delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRtt {
    pub server: IpAddr,
    pub seconds: f64,
}

/// Root delay of a client request whose ref-id names one of `servers`.
pub fn extract_gtrtt(request: &NtpPacket, servers: &ServerSet) -> Option<GtRtt> {
    if !request.is_client_request() {
        return None;
    }
    let server = servers.match_ref_id(request.ref_id)?;
    let seconds = request.root_delay_seconds();
    (seconds >= 0.0).then_some(GtRtt { server, seconds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwdSample {
    pub client: IpAddr,
    pub server: IpAddr,
    pub when: CaptureTime,
    /// Client-to-server seconds, offset-contaminated.
    pub c2s: Option<f64>,
    /// Server-to-client seconds, offset-contaminated; needs a rotation link.
    pub s2c: Option<f64>,
    pub poll: i8,
    pub gt_rtt: Option<f64>,
    /// Request carried no timestamps at all.
    #[serde(default)]
    pub zeroed: bool,
    #[serde(default)]
    pub tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothed_c2s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothed_s2c: Option<f64>,
}

impl OwdSample {
    pub fn has_owd(&self) -> bool {
        self.c2s.is_some() || self.s2c.is_some()
    }

    pub fn is_rotation_linked(&self) -> bool {
        self.s2c.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDiagnostics {
    pub requests: u64,
    pub responses: u64,
    pub duplicate_requests: u64,
    pub unmatched_responses: u64,
    pub rotation_links: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSession {
    pub client: IpAddr,
    pub server: IpAddr,
    pub samples: Vec<OwdSample>,
    /// Requests that never joined a rotation chain.
    pub one_shot_count: u64,
    pub kind: Option<PollingKind>,
    pub diagnostics: SessionDiagnostics,
}

impl ClientSession {
    pub fn new(client: IpAddr, server: IpAddr) -> Self {
        Self {
            client,
            server,
            samples: Vec::new(),
            one_shot_count: 0,
            kind: None,
            diagnostics: SessionDiagnostics::default(),
        }
    }

    pub fn key(&self) -> (IpAddr, IpAddr) {
        (self.client, self.server)
    }
}

/// Sessions plus the packets that belonged to none of them.
#[derive(Debug, Clone, Default)]
pub struct SessionSet {
    pub sessions: Vec<ClientSession>,
    pub ignored_packets: u64,
}

struct PendingRequest {
    transmit: NtpTimestamp,
    t0: NtpTime,
    sample: usize,
}

struct KeyState {
    session: ClientSession,
    recent_responses: VecDeque<NtpTimestamp>,
    pending: VecDeque<PendingRequest>,
}

/// Group packets (in capture order) into sessions keyed by (client IP, server IP).
pub fn build_sessions(
    packets: impl IntoIterator<Item = NtpPacket>,
    servers: &ServerSet,
    cfg: &SessionConfig,
) -> Result<SessionSet, SessionError> {
    if servers.is_empty() {
        return Err(SessionError::NoServers);
    }
    let depth = cfg.rotation_depth.max(1);
    let pivot = cfg.era_pivot;
    let mut states: BTreeMap<(IpAddr, IpAddr), KeyState> = BTreeMap::new();
    let mut ignored = 0u64;

    for p in packets {
        let key = if p.is_client_request() && servers.contains(&p.dst) {
            (p.src, p.dst)
        } else if p.is_server_response() && servers.contains(&p.src) {
            (p.dst, p.src)
        } else {
            ignored += 1;
            continue;
        };
        let st = states.entry(key).or_insert_with(|| KeyState {
            session: ClientSession::new(key.0, key.1),
            recent_responses: VecDeque::with_capacity(depth),
            pending: VecDeque::with_capacity(depth),
        });
        if p.is_client_request() {
            on_request(st, &p, servers, pivot, depth);
        } else {
            on_response(st, &p, cfg, pivot, depth);
        }
    }

    let sessions = states
        .into_values()
        .filter(|st| !st.session.samples.is_empty() || st.session.diagnostics.responses > 0)
        .map(|mut st| {
            st.session.one_shot_count =
                st.session.samples.iter().filter(|s| !s.is_rotation_linked()).count() as u64;
            st.session
        })
        .collect();
    Ok(SessionSet {
        sessions,
        ignored_packets: ignored,
    })
}

fn on_request(st: &mut KeyState, p: &NtpPacket, servers: &ServerSet, pivot: EraPivot, depth: usize) {
    let diag = &mut st.session.diagnostics;
    diag.requests += 1;
    if !p.transmit_ts.is_unset() && st.pending.iter().any(|r| r.transmit == p.transmit_ts) {
        diag.duplicate_requests += 1;
        return;
    }

    let t0 = p.transmit_ts.to_time(pivot);
    let t1 = NtpTime::from_capture(p.capture_ts);
    let c2s = t0.map(|t0| t1.seconds_since(t0));

    let mut s2c = None;
    if !p.origin_ts.is_unset() {
        if let Some(pos) = st.recent_responses.iter().position(|t| *t == p.origin_ts) {
            // Each response links to at most one later request.
            let t2 = st.recent_responses.remove(pos).unwrap();
            diag.rotation_links += 1;
            if let (Some(t2), Some(t3)) = (t2.to_time(pivot), p.receive_ts.to_time(pivot)) {
                s2c = Some(t3.seconds_since(t2));
            }
        }
    }

    let gt_rtt = extract_gtrtt(p, servers)
        .filter(|g| g.server == st.session.server)
        .map(|g| g.seconds);

    let idx = st.session.samples.len();
    st.session.samples.push(OwdSample {
        client: st.session.client,
        server: st.session.server,
        when: p.capture_ts,
        c2s,
        s2c,
        poll: p.poll,
        gt_rtt,
        zeroed: p.timestamps_zeroed(),
        tier: None,
        smoothed_c2s: None,
        smoothed_s2c: None,
    });
    if let Some(t0) = t0 {
        st.pending.push_back(PendingRequest {
            transmit: p.transmit_ts,
            t0,
            sample: idx,
        });
        while st.pending.len() > depth {
            st.pending.pop_front();
        }
    }
}

fn on_response(st: &mut KeyState, p: &NtpPacket, cfg: &SessionConfig, pivot: EraPivot, depth: usize) {
    let diag = &mut st.session.diagnostics;
    diag.responses += 1;
    let matched = (!p.origin_ts.is_unset())
        .then(|| st.pending.iter().position(|r| r.transmit == p.origin_ts))
        .flatten();
    match matched {
        Some(pos) => {
            let req = st.pending.remove(pos).unwrap();
            if cfg.t1_source == T1Source::PreferServerReceive {
                if let Some(t1) = p.receive_ts.to_time(pivot) {
                    st.session.samples[req.sample].c2s = Some(t1.seconds_since(req.t0));
                }
            }
        }
        None => diag.unmatched_responses += 1,
    }
    if !p.transmit_ts.is_unset() {
        st.recent_responses.push_back(p.transmit_ts);
        while st.recent_responses.len() > depth {
            st.recent_responses.pop_front();
        }
    }
}

/// A session is one-shot when no request ever joined a rotation chain:
/// single requests, or repeated requests with zeroed timestamp fields.
pub fn detect_one_shot(session: &ClientSession) -> bool {
    !session.samples.iter().any(OwdSample::is_rotation_linked)
}

#[derive(Serialize)]
struct SampleLineOut<'a> {
    v: u32,
    #[serde(flatten)]
    sample: &'a OwdSample,
}

#[derive(Deserialize)]
struct SampleLineIn {
    v: u32,
    #[serde(flatten)]
    sample: OwdSample,
}

/// One JSON object per sample, tagged with [`SAMPLE_SCHEMA_VERSION`].
pub fn write_samples_jsonl<'a>(
    samples: impl IntoIterator<Item = &'a OwdSample>,
    out: &mut dyn Write,
) -> io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, &SampleLineOut { v: SAMPLE_SCHEMA_VERSION, sample: s })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples_jsonl(input: impl BufRead) -> Result<Vec<OwdSample>, SessionError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLineIn = serde_json::from_str(&line).map_err(|e| SessionError::BadSampleLine {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        if parsed.v != SAMPLE_SCHEMA_VERSION {
            return Err(SessionError::BadSampleLine {
                line: i as u64 + 1,
                message: format!("unsupported schema version {}", parsed.v),
            });
        }
        out.push(parsed.sample);
    }
    Ok(out)
}

/// Regroup labeled samples (e.g. read back from JSONL) into sessions.
pub fn sessions_from_samples(samples: Vec<OwdSample>) -> Vec<ClientSession> {
    let mut map: BTreeMap<(IpAddr, IpAddr), ClientSession> = BTreeMap::new();
    for s in samples {
        map.entry((s.client, s.server))
            .or_insert_with(|| ClientSession::new(s.client, s.server))
            .samples
            .push(s);
    }
    map.into_values()
        .map(|mut s| {
            s.one_shot_count = s.samples.iter().filter(|x| !x.is_rotation_linked()).count() as u64;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::CaptureRecord;
    use crate::codec::{seconds_to_fixed_16_16_ceil, MODE_CLIENT, MODE_SERVER};
    use std::net::Ipv4Addr;

    const CLIENT: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 9));
    const SERVER: IpAddr = IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1));
    const BASE: i128 = 1_433_116_800_000_000_000;

    fn ts(ms: i128) -> NtpTimestamp {
        NtpTime::from_unix_nanos(BASE + ms * 1_000_000).to_timestamp()
    }

    fn packet(mode: u8, capture_ms: i128) -> NtpPacket {
        let (src, dst) = if mode == MODE_CLIENT { (CLIENT, SERVER) } else { (SERVER, CLIENT) };
        let meta = CaptureRecord {
            capture_ts: CaptureTime::from_unix_nanos(BASE + capture_ms * 1_000_000),
            src,
            dst,
            sport: 123,
            dport: 123,
            payload: vec![],
        };
        let mut p = NtpPacket::sntp_request(&meta);
        p.mode = mode;
        p.poll = 6;
        p
    }

    fn servers() -> ServerSet {
        ServerSet::new([SERVER])
    }

    #[test]
    fn rotation_example() {
        // Response sent at 99.500 (server clock), received by client at 99.530.
        let mut resp = packet(MODE_SERVER, 99_500);
        resp.transmit_ts = ts(99_500);
        let mut req = packet(MODE_CLIENT, 100_020);
        req.transmit_ts = ts(100_000);
        req.origin_ts = ts(99_500);
        req.receive_ts = ts(99_530);
        let set = build_sessions([resp, req], &servers(), &SessionConfig::default()).unwrap();
        let s = &set.sessions[0].samples[0];
        assert!((s.c2s.unwrap() - 0.020).abs() < 1e-9);
        assert!((s.s2c.unwrap() - 0.030).abs() < 1e-9);
        assert_eq!(set.sessions[0].diagnostics.rotation_links, 1);
    }

    #[test]
    fn prefers_server_receive_timestamp() {
        let mut req = packet(MODE_CLIENT, 100_020);
        req.transmit_ts = ts(100_000);
        let mut resp = packet(MODE_SERVER, 100_021);
        resp.origin_ts = ts(100_000);
        resp.receive_ts = ts(100_015);
        resp.transmit_ts = ts(100_016);
        let set = build_sessions([req.clone(), resp.clone()], &servers(), &SessionConfig::default()).unwrap();
        assert!((set.sessions[0].samples[0].c2s.unwrap() - 0.015).abs() < 1e-9);

        let cfg = SessionConfig {
            t1_source: T1Source::Capture,
            ..Default::default()
        };
        let set = build_sessions([req, resp], &servers(), &cfg).unwrap();
        assert!((set.sessions[0].samples[0].c2s.unwrap() - 0.020).abs() < 1e-9);
    }

    #[test]
    fn zeroed_sntp_request() {
        let set = build_sessions([packet(MODE_CLIENT, 0)], &servers(), &SessionConfig::default()).unwrap();
        let sess = &set.sessions[0];
        assert_eq!(sess.samples[0].c2s, None);
        assert_eq!(sess.samples[0].s2c, None);
        assert!(sess.samples[0].zeroed);
        assert_eq!(sess.one_shot_count, 1);
        assert!(detect_one_shot(sess));
    }

    fn rotated_exchange(n: usize) -> Vec<NtpPacket> {
        let mut out = Vec::new();
        let mut prev_resp: Option<(NtpTimestamp, NtpTimestamp)> = None;
        for k in 0..n as i128 {
            let t0 = k * 64_000;
            let mut req = packet(MODE_CLIENT, t0 + 10);
            req.transmit_ts = ts(t0);
            if let Some((t2, t3)) = prev_resp {
                req.origin_ts = t2;
                req.receive_ts = t3;
            }
            let mut resp = packet(MODE_SERVER, t0 + 11);
            resp.origin_ts = ts(t0);
            resp.receive_ts = ts(t0 + 10);
            resp.transmit_ts = ts(t0 + 11);
            prev_resp = Some((ts(t0 + 11), ts(t0 + 26)));
            out.push(req);
            out.push(resp);
        }
        out
    }

    #[test]
    fn sustained_exchange_is_not_one_shot() {
        let set = build_sessions(rotated_exchange(20), &servers(), &SessionConfig::default()).unwrap();
        let sess = &set.sessions[0];
        assert_eq!(sess.samples.len(), 20);
        assert!(!detect_one_shot(sess));
        assert_eq!(sess.one_shot_count, 1);
        for s in &sess.samples[1..] {
            assert!((s.c2s.unwrap() - 0.010).abs() < 1e-9);
            assert!((s.s2c.unwrap() - 0.015).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_is_injective_and_duplicates_counted() {
        let mut pkts = rotated_exchange(2);
        let dup = pkts[2].clone();
        pkts.insert(3, dup);
        let set = build_sessions(pkts, &servers(), &SessionConfig::default()).unwrap();
        let sess = &set.sessions[0];
        assert_eq!(sess.samples.len(), 2);
        assert_eq!(sess.diagnostics.duplicate_requests, 1);
        assert_eq!(sess.diagnostics.rotation_links, 1);
    }

    #[test]
    fn gtrtt_ipv4_match() {
        let mut req = packet(MODE_CLIENT, 0);
        req.ref_id = [192, 0, 2, 1];
        req.root_delay = 0x0000_0800;
        let g = extract_gtrtt(&req, &servers()).unwrap();
        assert_eq!(g.seconds, 0.03125);
        assert_eq!(g.server, SERVER);
    }

    #[test]
    fn gtrtt_reference_clock_tag_absent() {
        let mut req = packet(MODE_CLIENT, 0);
        req.stratum = 1;
        req.ref_id = *b"LOCL";
        req.root_delay = seconds_to_fixed_16_16_ceil(0.01).unwrap();
        assert_eq!(extract_gtrtt(&req, &servers()), None);
    }

    #[test]
    fn gtrtt_ipv6_md5_ref_id() {
        // First four MD5 bytes of the 16-byte address, from Python's hashlib.
        let v6: IpAddr = "2001:db8::1".parse().unwrap();
        assert_eq!(ref_id_for(v6), [0x39, 0xab, 0x9b, 0x37]);
        let set = ServerSet::new([v6]);
        let mut req = packet(MODE_CLIENT, 0);
        req.ref_id = [0x39, 0xab, 0x9b, 0x37];
        req.root_delay = 0x0000_0800;
        assert_eq!(extract_gtrtt(&req, &set).unwrap().server, v6);
    }

    #[test]
    fn empty_server_set_rejected() {
        assert!(matches!(
            build_sessions(Vec::new(), &ServerSet::default(), &SessionConfig::default()),
            Err(SessionError::NoServers)
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let set = build_sessions(rotated_exchange(3), &servers(), &SessionConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_samples_jsonl(&set.sessions[0].samples, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("{\"v\":1,"));
        let back = read_samples_jsonl(&buf[..]).unwrap();
        assert_eq!(back, set.sessions[0].samples);
        let regrouped = sessions_from_samples(back);
        assert_eq!(regrouped.len(), 1);
        assert_eq!(regrouped[0].samples.len(), 3);
    }
}
