//! Synthetic NTP traffic and latency geometry with known answers.
//!
//! Traces are built on an integer nanosecond timeline as seen from a capture
//! point at the server. The server clock is the reference; each client clock
//! reads `true time + offset + drift * elapsed`. Capture times are truncated
//! to microseconds so pcap and JSONL output carry identical data.

use std::net::{IpAddr, Ipv4Addr};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{CaptureRecord, CaptureTime, NTP_PORT};
use crate::codec::{encode_packet, seconds_to_fixed_16_16_ceil, NtpPacket, NtpTime, NtpTimestamp, MODE_CLIENT, MODE_SERVER};
use crate::estimator::complete::pinv;
use crate::estimator::geo::{distance, geo_latency, GeoCoordinate};
use crate::estimator::LatencyMatrix;
use crate::session::ref_id_for;
use crate::tier::required_samples;

/// 2024-01-01T00:00:00Z.
pub const DEFAULT_EPOCH_UNIX_S: i64 = 1_704_067_200;
const SERVER_PROCESSING_NS: i128 = 10_000;
const NS: i128 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid profile {index}: {message}")]
    InvalidProfile { index: usize, message: String },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    WellSyncConstant,
    WellSyncBackoff,
    OutOfSync,
    SntpOneShot,
}

impl std::str::FromStr for ProfileKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown profile kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncState {
    Synced,
    Unsynced,
    Sntp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub kind: ProfileKind,
    pub client: IpAddr,
    pub server: IpAddr,
    pub true_c2s_ms: f64,
    pub true_s2c_ms: f64,
    /// Each direction gets uniform extra delay in `[0, jitter_ms]`.
    pub jitter_ms: f64,
    pub offset_ms: f64,
    pub drift_ppm: f64,
    /// Constant exponent, or the starting one for backoff.
    pub poll: i8,
    /// Backoff ceiling; ignored by the other kinds.
    pub max_poll: i8,
    pub emits_gtrtt: bool,
    pub duration_s: f64,
}

impl ClientProfile {
    pub fn new(kind: ProfileKind, client: IpAddr, server: IpAddr) -> Self {
        let out_of_sync = kind == ProfileKind::OutOfSync;
        Self {
            kind,
            client,
            server,
            true_c2s_ms: 10.0,
            true_s2c_ms: 12.0,
            jitter_ms: 0.0,
            offset_ms: if out_of_sync { 80.0 } else { 0.0 },
            drift_ppm: 0.0,
            poll: 6,
            max_poll: 10,
            emits_gtrtt: matches!(kind, ProfileKind::WellSyncConstant | ProfileKind::OutOfSync),
            duration_s: 86_400.0,
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), SynthError> {
        let bad = |message: String| Err(SynthError::InvalidProfile { index, message });
        if !(self.true_c2s_ms > 0.0 && self.true_s2c_ms > 0.0) {
            return bad("true OWDs must be > 0".into());
        }
        if !(self.jitter_ms >= 0.0) {
            return bad("jitter must be >= 0".into());
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return bad("duration must be a finite value >= 0".into());
        }
        if !(self.offset_ms.is_finite() && self.drift_ppm.is_finite()) {
            return bad("offset and drift must be finite".into());
        }
        if !(1..=17).contains(&self.poll) {
            return bad(format!("poll exponent {} outside 1..=17", self.poll));
        }
        if self.kind == ProfileKind::WellSyncBackoff && !(self.poll..=17).contains(&self.max_poll) {
            return bad(format!("max_poll {} must lie in {}..=17", self.max_poll, self.poll));
        }
        if self.client == self.server {
            return bad("client and server share an address".into());
        }
        Ok(())
    }

    pub fn sync_state(&self) -> SyncState {
        match self.kind {
            ProfileKind::WellSyncConstant | ProfileKind::WellSyncBackoff => SyncState::Synced,
            ProfileKind::OutOfSync => SyncState::Unsynced,
            ProfileKind::SntpOneShot => SyncState::Sntp,
        }
    }

    /// Poll exponent of each request sent within the duration.
    pub fn poll_schedule(&self) -> Vec<i8> {
        let duration_ns = secs_to_ns(self.duration_s);
        if self.kind == ProfileKind::SntpOneShot {
            return if duration_ns > 0 { vec![0] } else { Vec::new() };
        }
        let mut out = Vec::new();
        let (mut elapsed, mut p, mut run) = (0i128, self.poll, 0usize);
        while elapsed < duration_ns {
            out.push(p);
            elapsed += (1i128 << p) * NS;
            run += 1;
            if self.kind == ProfileKind::WellSyncBackoff && p < self.max_poll {
                let n = required_samples(p as i32).expect("validated poll");
                if run == n {
                    p += 1;
                    run = 0;
                }
            }
        }
        out
    }
}

/// Ground truth for one packet of a simulated trace.
///
/// Times are seconds. A request row describes the sample it produces: its
/// `true_s2c` is the delay of the previous response, echoed through rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub packet_index: usize,
    pub true_c2s: Option<f64>,
    pub true_s2c: Option<f64>,
    pub offset: f64,
    pub sync_state: SyncState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub records: Vec<CaptureRecord>,
    pub truth: Vec<TruthRow>,
    /// Index of the profile each packet came from.
    pub profile_of: Vec<usize>,
}

struct Event {
    at_ns: i128,
    profile: usize,
    seq: usize,
    record: CaptureRecord,
    truth: TruthRow,
}

fn secs_to_ns(s: f64) -> i128 {
    (s * 1e9).round() as i128
}

fn ms_to_ns(ms: f64) -> i128 {
    (ms * 1e6).round() as i128
}

fn wire(ns: i128) -> NtpTimestamp {
    NtpTime::from_unix_nanos(ns).to_timestamp()
}

fn record(p: &NtpPacket, at_ns: i128) -> CaptureRecord {
    CaptureRecord {
        capture_ts: CaptureTime::from_unix_nanos(at_ns).truncate_micros(),
        src: p.src,
        dst: p.dst,
        sport: p.sport,
        dport: p.dport,
        payload: encode_packet(p).expect("generated packets are valid").to_vec(),
    }
}

fn blank(src: IpAddr, dst: IpAddr, mode: u8) -> NtpPacket {
    NtpPacket {
        leap: 0,
        version: 4,
        mode,
        stratum: 0,
        poll: 0,
        precision: 0,
        root_delay: 0,
        root_dispersion: 0,
        ref_id: [0; 4],
        reference_ts: NtpTimestamp::UNSET,
        origin_ts: NtpTimestamp::UNSET,
        receive_ts: NtpTimestamp::UNSET,
        transmit_ts: NtpTimestamp::UNSET,
        capture_ts: CaptureTime::default(),
        src,
        dst,
        sport: NTP_PORT,
        dport: NTP_PORT,
    }
}

fn simulate_profile(p: &ClientProfile, index: usize, seed: u64, epoch_ns: i128) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let schedule = p.poll_schedule();
    let first_interval_ns = (1i128 << p.poll.max(0)) * NS;
    let start = epoch_ns + rng.random_range(0..first_interval_ns as u64) as i128;
    let jitter_ns = ms_to_ns(p.jitter_ms);
    let draw = |rng: &mut ChaCha8Rng| {
        if jitter_ns > 0 {
            rng.random_range(0..=jitter_ns as u64) as i128
        } else {
            0
        }
    };
    let offset_at = |t: i128| ms_to_ns(p.offset_ms) + (p.drift_ppm * 1e-6 * (t - start) as f64).round() as i128;
    let state = p.sync_state();
    let mut events = Vec::with_capacity(schedule.len() * 2);
    let push = |events: &mut Vec<Event>, at_ns: i128, pkt: &NtpPacket, truth: TruthRow| {
        let seq = events.len();
        events.push(Event {
            at_ns,
            profile: index,
            seq,
            record: record(pkt, at_ns),
            truth,
        });
    };

    // Previous exchange: (server transmit, client receive, measured RTT, true s2c).
    let mut prev: Option<(i128, i128, f64, f64)> = None;
    let mut sent = 0i128;
    for &poll in &schedule {
        let t = start + sent;
        sent += (1i128 << poll.max(0)) * NS;
        let c2s = ms_to_ns(p.true_c2s_ms) + draw(&mut rng);
        let s2c = ms_to_ns(p.true_s2c_ms) + draw(&mut rng);
        let arrive = t + c2s;
        let depart = arrive + SERVER_PROCESSING_NS;
        let back = depart + s2c;

        let mut req = blank(p.client, p.server, MODE_CLIENT);
        if p.kind != ProfileKind::SntpOneShot {
            req.stratum = 3;
            req.poll = poll;
            req.precision = -20;
            req.root_dispersion = 0x0000_0200;
            req.transmit_ts = wire(t + offset_at(t));
            if let Some((s_tx, c_rx, rtt, _)) = prev {
                req.origin_ts = wire(s_tx);
                req.receive_ts = wire(c_rx + offset_at(c_rx));
                req.reference_ts = req.receive_ts;
                if p.emits_gtrtt {
                    req.root_delay = seconds_to_fixed_16_16_ceil(rtt).expect("rtt fits 16.16");
                    req.ref_id = ref_id_for(p.server);
                }
            }
        }
        let req_truth = TruthRow {
            packet_index: 0,
            true_c2s: Some(c2s as f64 / 1e9),
            true_s2c: prev.map(|x| x.3),
            offset: offset_at(t) as f64 / 1e9,
            sync_state: state,
        };
        push(&mut events, arrive, &req, req_truth);

        let mut resp = blank(p.server, p.client, MODE_SERVER);
        resp.stratum = 2;
        resp.poll = req.poll;
        resp.precision = -23;
        resp.root_delay = 0x0000_0080;
        resp.root_dispersion = 0x0000_0100;
        resp.ref_id = [203, 0, 113, 1];
        resp.reference_ts = wire(depart - 16 * NS);
        resp.origin_ts = req.transmit_ts;
        resp.receive_ts = wire(arrive);
        resp.transmit_ts = wire(depart);
        let resp_truth = TruthRow {
            packet_index: 0,
            true_c2s: Some(c2s as f64 / 1e9),
            true_s2c: Some(s2c as f64 / 1e9),
            offset: offset_at(back) as f64 / 1e9,
            sync_state: state,
        };
        push(&mut events, depart, &resp, resp_truth);

        // The client's own delay estimate from this exchange, as its clock sees it.
        let t0 = NtpTime::from_unix_nanos(t + offset_at(t));
        let t1 = NtpTime::from_unix_nanos(arrive);
        let t2 = NtpTime::from_unix_nanos(depart);
        let t3 = NtpTime::from_unix_nanos(back + offset_at(back));
        let rtt = t3.seconds_since(t0) - t2.seconds_since(t1);
        prev = Some((depart, back, rtt, s2c as f64 / 1e9));
    }
    events
}

/// Merge the traffic of every profile into one capture-ordered trace.
pub fn simulate_trace(profiles: &[ClientProfile], seed: u64) -> Result<SimTrace, SynthError> {
    simulate_trace_at(profiles, seed, DEFAULT_EPOCH_UNIX_S)
}

pub fn simulate_trace_at(profiles: &[ClientProfile], seed: u64, epoch_unix_s: i64) -> Result<SimTrace, SynthError> {
    if profiles.is_empty() {
        return Err(SynthError::InvalidProfile {
            index: 0,
            message: "no profiles".into(),
        });
    }
    for (i, p) in profiles.iter().enumerate() {
        p.validate(i)?;
    }
    let epoch_ns = epoch_unix_s as i128 * NS;
    let mut events: Vec<Event> = profiles
        .iter()
        .enumerate()
        .flat_map(|(i, p)| simulate_profile(p, i, seed, epoch_ns))
        .collect();
    events.sort_by_key(|e| (e.at_ns, e.profile, e.seq));

    let mut trace = SimTrace {
        records: Vec::with_capacity(events.len()),
        truth: Vec::with_capacity(events.len()),
        profile_of: Vec::with_capacity(events.len()),
    };
    for (i, mut e) in events.into_iter().enumerate() {
        e.truth.packet_index = i;
        trace.records.push(e.record);
        trace.truth.push(e.truth);
        trace.profile_of.push(e.profile);
    }
    Ok(trace)
}

/// Sequential client addresses in 10.0.0.0/8, starting at 10.0.0.1.
pub fn client_address(i: usize) -> IpAddr {
    let v = 0x0A00_0001u32 + i as u32;
    IpAddr::V4(Ipv4Addr::from(v))
}

/// Server addresses in 192.0.2.0/24 (TEST-NET-1), starting at .1.
pub fn server_address(i: usize) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1 + (i % 254) as u8))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Region {
    /// Square of side `width_km`.
    Plane { width_km: f64 },
    Geo {
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
    },
}

impl Region {
    /// Roughly the contiguous United States.
    pub const US: Region = Region::Geo {
        lat_min: 30.0,
        lat_max: 48.0,
        lon_min: -122.0,
        lon_max: -75.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Point {
    Plane { x_km: f64, y_km: f64 },
    Geo { coordinate: GeoCoordinate },
}

impl Point {
    pub fn distance_m(&self, other: &Point) -> f64 {
        match (self, other) {
            (Point::Plane { x_km: a, y_km: b }, Point::Plane { x_km: c, y_km: d }) => {
                ((a - c).powi(2) + (b - d).powi(2)).sqrt() * 1000.0
            }
            (Point::Geo { coordinate: a }, Point::Geo { coordinate: b }) => distance(*a, *b).meters,
            _ => panic!("mixed point kinds"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub m: usize,
    pub n: usize,
    pub region: Region,
    /// Probability that each directional server-client entry is observed.
    pub mask_density: f64,
    /// Observed entries are scaled by `1 + u`, `u` uniform in `[0, noise]`.
    pub noise: f64,
    /// Place all servers on one line (plane) or meridian (geo).
    pub collinear_servers: bool,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            m: 6,
            n: 50,
            region: Region::Plane { width_km: 4000.0 },
            mask_density: 1.0,
            noise: 0.0,
            collinear_servers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryInstance {
    pub params: GeometryParams,
    pub servers: Vec<Point>,
    pub clients: Vec<Point>,
    /// Full `(m+n)²` one-way latencies in ms, servers first.
    pub truth: DMatrix<f64>,
    /// `truth` as a measurement campaign would see it: A complete, B and D
    /// masked and noisy, C unobserved.
    pub observed: LatencyMatrix,
    /// Squared server latencies have rank below 4 (e.g. collinear servers).
    pub rank_deficient: bool,
}

impl GeometryInstance {
    pub fn ids(m: usize, n: usize) -> Vec<String> {
        (0..m).map(|i| format!("s{i}")).chain((0..n).map(|j| format!("c{j}"))).collect()
    }
}

fn sample_point(region: &Region, rng: &mut ChaCha8Rng, line: Option<f64>) -> Point {
    match *region {
        Region::Plane { width_km } => Point::Plane {
            x_km: rng.random_range(0.0..width_km),
            y_km: line.map_or_else(|| rng.random_range(0.0..width_km), |f| f * width_km),
        },
        Region::Geo {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        } => {
            let lat = rng.random_range(lat_min..lat_max);
            let lon = line.map_or_else(|| rng.random_range(lon_min..lon_max), |f| lon_min + f * (lon_max - lon_min));
            Point::Geo {
                coordinate: GeoCoordinate::new(lat, lon).expect("region within range"),
            }
        }
    }
}

pub fn generate_geometry(params: &GeometryParams, seed: u64) -> Result<GeometryInstance, SynthError> {
    let GeometryParams {
        m,
        n,
        region,
        mask_density,
        noise,
        collinear_servers,
    } = params.clone();
    if m < 4 || n < 1 {
        return Err(SynthError::InvalidGeometry(format!("need m >= 4 and n >= 1, got m={m} n={n}")));
    }
    if !(mask_density > 0.0 && mask_density <= 1.0) {
        return Err(SynthError::InvalidGeometry(format!("mask density {mask_density} not in (0, 1]")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(SynthError::InvalidGeometry(format!("noise {noise} must be >= 0")));
    }
    match region {
        Region::Plane { width_km } if !(width_km > 0.0 && width_km.is_finite()) => {
            return Err(SynthError::InvalidGeometry("plane width must be > 0".into()))
        }
        Region::Geo {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        } if !(-90.0 <= lat_min && lat_min < lat_max && lat_max <= 90.0 && -180.0 <= lon_min && lon_min < lon_max && lon_max <= 180.0) => {
            return Err(SynthError::InvalidGeometry("bad geographic bounds".into()))
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let line = collinear_servers.then_some(0.5);
    let servers: Vec<Point> = (0..m).map(|_| sample_point(&region, &mut rng, line)).collect();
    let clients: Vec<Point> = (0..n).map(|_| sample_point(&region, &mut rng, None)).collect();
    let all: Vec<&Point> = servers.iter().chain(&clients).collect();
    let s = m + n;
    let truth = DMatrix::from_fn(s, s, |i, j| if i == j { 0.0 } else { geo_latency(all[i].distance_m(all[j])) });

    let mut observed = LatencyMatrix::empty(m, GeometryInstance::ids(m, n));
    let scale = |rng: &mut ChaCha8Rng| if noise > 0.0 { 1.0 + rng.random_range(0.0..=noise) } else { 1.0 };
    for i in 0..s {
        for j in 0..s {
            if i == j || (i >= m && j >= m) {
                continue;
            }
            let in_a = i < m && j < m;
            if in_a || rng.random_bool(mask_density) {
                observed.set(i, j, truth[(i, j)] * scale(&mut rng));
            }
        }
    }

    let sq_a = truth.view((0, 0), (m, m)).map(|v| v * v);
    let (_, rank) = pinv(&sq_a, 1e-10);
    Ok(GeometryInstance {
        params: params.clone(),
        servers,
        clients,
        truth,
        observed,
        rank_deficient: rank < 4,
    })
}
