//! Pipeline stages behind the CLI subcommands. Each reads its inputs, writes
//! its artifacts under `output_dir`, and returns a summary for the caller.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{read_capture, trace_writers, CaptureRecord};
use crate::codec::decode_packet;
use crate::config::{read_exclusions, PipelineConfig};
use crate::estimator::io::{
    read_a_rtt_csv, read_matrix_json, read_min_owd_csv, read_servers_csv, write_cdf_csv, write_errors_csv,
    write_matrix_csv, write_matrix_json, write_min_owd_csv, write_servers_csv,
};
use crate::estimator::{
    assemble_x, build_a, completion_methods, disc_geolocate, holdout_evaluate, AssembleConfig, CompletionMethod,
    GeoEstimate, HoldoutReport, LatencyMatrix, Located, RegressionCoeffs, ServerMeta,
};
use crate::session::{build_sessions, read_samples_jsonl, sessions_from_samples, write_samples_jsonl, ServerSet};
use crate::synth::{
    client_address, generate_geometry, server_address, simulate_trace_at, ClientProfile, GeometryInstance,
    GeometryParams, Point, ProfileKind, DEFAULT_EPOCH_UNIX_S,
};
use crate::tier::{assign_tiers, min_owds, MinOwd, PollingKind, Tier, TierCounts};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    /// Bad flags, config or missing reference files.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inputs that parse but cannot produce a result.
    #[error("data error: {0}")]
    Data(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 1,
            CommandError::Data(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CommandError::Config(_) => "config",
            CommandError::Data(_) => "data",
        }
    }
}

type Result<T> = std::result::Result<T, CommandError>;

fn data(e: impl std::fmt::Display) -> CommandError {
    CommandError::Data(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CommandError {
    CommandError::Config(e.to_string())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    File::create(&p)
        .map(BufWriter::new)
        .map_err(|e| data(format!("{}: {e}", p.display())))
}

fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(data)
}

fn prepare(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate().map_err(config)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| data(format!("{}: {e}", cfg.output_dir.display())))
}

fn load_servers(cfg: &PipelineConfig) -> Result<Vec<ServerMeta>> {
    let path = cfg
        .servers
        .as_ref()
        .ok_or_else(|| config("a server list (id,address,lat,lon) is required"))?;
    read_servers_csv(open(path)?).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn server_set(cfg: &PipelineConfig) -> Result<ServerSet> {
    let mut addrs = cfg.server_addresses.clone();
    if cfg.servers.is_some() {
        addrs.extend(load_servers(cfg)?.iter().map(|s| s.address));
    }
    let set = ServerSet::new(addrs);
    if set.is_empty() {
        return Err(config("no server addresses configured"));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifySummary {
    pub datagrams: u64,
    pub skipped: u64,
    pub undecodable: u64,
    pub ignored: u64,
    pub sessions: usize,
    pub counts: TierCounts,
}

#[derive(Serialize)]
struct SessionRow {
    client: IpAddr,
    server: IpAddr,
    kind: PollingKind,
    samples: usize,
    tier0: u64,
    tier1: u64,
    tier2: u64,
    tier3: u64,
    alpha_c2s: Option<f64>,
    alpha_s2c: Option<f64>,
}

/// Decode traces, build sessions, label every sample with a tier.
///
/// Writes `samples.jsonl`, `tiers.csv`, `sessions.csv` and `min_owd.csv`.
pub fn cmd_classify(traces: &[PathBuf], cfg: &PipelineConfig) -> Result<ClassifySummary> {
    prepare(cfg)?;
    let servers = server_set(cfg)?;

    let mut records: Vec<CaptureRecord> = Vec::new();
    let mut skipped = 0;
    for path in traces {
        let mut reader = read_capture(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        for r in reader.by_ref() {
            records.push(r.map_err(|e| data(format!("{}: {e}", path.display())))?);
        }
        skipped += reader.stats().skipped();
    }
    // Several files may cover the same period.
    records.sort_by_key(|r| r.capture_ts);

    let mut undecodable = 0;
    let packets: Vec<_> = records
        .iter()
        .filter_map(|r| {
            decode_packet(&r.payload, r)
                .map_err(|e| {
                    log::debug!("{} -> {}: {e}", r.src, r.dst);
                    undecodable += 1;
                })
                .ok()
        })
        .collect();
    let set = build_sessions(packets, &servers, &cfg.session).map_err(data)?;

    let mut sessions = set.sessions;
    let mut rows = Vec::with_capacity(sessions.len());
    let mut counts = TierCounts::default();
    for s in &mut sessions {
        let labeling = assign_tiers(s, &cfg.classifier);
        let c = TierCounts::of(&s.samples);
        counts.merge(&c);
        rows.push(SessionRow {
            client: s.client,
            server: s.server,
            kind: labeling.kind,
            samples: s.samples.len(),
            tier0: c.0[0],
            tier1: c.0[1],
            tier2: c.0[2],
            tier3: c.0[3],
            alpha_c2s: labeling.alpha_c2s,
            alpha_s2c: labeling.alpha_s2c,
        });
    }

    let out = &cfg.output_dir;
    let mut w = create(out, "samples.jsonl")?;
    write_samples_jsonl(sessions.iter().flat_map(|s| &s.samples), &mut w).map_err(data)?;
    finish(w)?;

    let mut w = csv::Writer::from_writer(create(out, "tiers.csv")?);
    w.write_record(["tier", "samples", "fraction"]).map_err(data)?;
    let total = counts.total();
    for t in Tier::ALL {
        let k = counts.0[t.index()];
        let frac = if total == 0 { 0.0 } else { k as f64 / total as f64 };
        w.write_record([t.index().to_string(), k.to_string(), format!("{frac:?}")])
            .map_err(data)?;
    }
    w.flush().map_err(data)?;

    let mut w = csv::Writer::from_writer(create(out, "sessions.csv")?);
    for r in &rows {
        w.serialize(r).map_err(data)?;
    }
    w.flush().map_err(data)?;

    let owds = min_owds(&sessions, cfg.estimator.tier_floor);
    write_min_owd_csv(&owds, create(out, "min_owd.csv")?).map_err(data)?;

    Ok(ClassifySummary {
        datagrams: records.len() as u64,
        skipped,
        undecodable,
        ignored: set.ignored_packets,
        sessions: sessions.len(),
        counts,
    })
}

/// Minimum OWDs from either a `min_owd.csv` or a labeled `samples.jsonl`.
/// Labeled samples are reduced at the configured tier floor.
pub fn load_min_owds(path: &Path, cfg: &PipelineConfig) -> Result<BTreeMap<(IpAddr, IpAddr), MinOwd>> {
    let input = open(path)?;
    let wrap = |e: &dyn std::fmt::Display| data(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "jsonl") {
        let samples = read_samples_jsonl(input).map_err(|e| wrap(&e))?;
        Ok(min_owds(&sessions_from_samples(samples), cfg.estimator.tier_floor))
    } else {
        read_min_owd_csv(input).map_err(|e| wrap(&e))
    }
}

fn method<'a>(
    registry: &'a crate::registry::Registry<dyn CompletionMethod>,
    name: &str,
) -> Result<&'a dyn CompletionMethod> {
    registry.get(name).map_err(config)
}

fn write_holdout(out: &Path, report: &HoldoutReport) -> Result<()> {
    write_errors_csv(report, create(out, "holdout_errors.csv")?).map_err(data)?;
    write_cdf_csv(&report.cdf(), create(out, "holdout_cdf.csv")?).map_err(data)?;
    let mut w = create(out, "holdout.json")?;
    serde_json::to_writer_pretty(&mut w, report).map_err(data)?;
    w.write_all(b"\n").map_err(data)?;
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompleteSummary {
    pub method: String,
    pub servers: usize,
    pub clients: usize,
    pub observed: usize,
    pub a_filled: usize,
    pub a_clamped: usize,
    pub coeffs: Option<RegressionCoeffs>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub holdout_mean_rel_error: Option<f64>,
}

/// Assemble the block matrix from minimum OWDs and complete it.
///
/// Writes `server_block.csv`, `observed.json`, `completed.csv` and, when a
/// holdout fraction is set, the holdout reports.
pub fn cmd_complete(input: &Path, cfg: &PipelineConfig) -> Result<CompleteSummary> {
    prepare(cfg)?;
    let servers = load_servers(cfg)?;
    if servers.len() < 4 {
        return Err(data(format!("need at least 4 servers, got {}", servers.len())));
    }
    let registry = completion_methods();
    let method = method(&registry, &cfg.estimator.method)?;
    let owds = load_min_owds(input, cfg)?;

    let a_rtt = match &cfg.a_rtt {
        Some(p) => read_a_rtt_csv(open(p)?, &servers).map_err(|e| data(format!("{}: {e}", p.display())))?,
        None => DMatrix::from_element(servers.len(), servers.len(), None),
    };
    let block = build_a(&servers, &a_rtt).map_err(data)?;
    let excluded = match &cfg.exclude {
        Some(p) => read_exclusions(p).map_err(config)?,
        None => Default::default(),
    };
    let acfg = AssembleConfig {
        min_servers: cfg.estimator.min_servers,
        excluded,
        symmetrize: cfg.estimator.symmetrize,
    };
    let x = assemble_x(&block.a, &servers, &owds, &acfg).map_err(data)?;
    method.check(&x).map_err(data)?;
    let ccfg = cfg.estimator.completion();
    let done = crate::estimator::complete::complete_with(method, &x, &ccfg).map_err(data)?;
    for w in &done.warnings {
        log::warn!("{w}");
    }

    let out = &cfg.output_dir;
    let server_ids: Vec<String> = servers.iter().map(|s| s.id.clone()).collect();
    write_matrix_csv(&server_ids, &block.a, None, create(out, "server_block.csv")?).map_err(data)?;
    write_matrix_json(&x, create(out, "observed.json")?).map_err(data)?;
    write_matrix_csv(&x.ids, &done.values, None, create(out, "completed.csv")?).map_err(data)?;

    let holdout = if cfg.estimator.holdout > 0.0 {
        let r = holdout_evaluate(&x, cfg.estimator.holdout, cfg.seed, method, &ccfg).map_err(data)?;
        write_holdout(out, &r)?;
        r.mean_rel_error
    } else {
        None
    };

    Ok(CompleteSummary {
        method: cfg.estimator.method.clone(),
        servers: servers.len(),
        clients: x.n,
        observed: x.observed_count(),
        a_filled: block.filled,
        a_clamped: block.clamped_observed,
        coeffs: block.coeffs,
        iterations: done.iterations,
        converged: done.converged,
        warnings: done.warnings,
        holdout_mean_rel_error: holdout,
    })
}

/// Hold out observed entries of a saved matrix (`observed.json`) and score
/// the configured method on them.
pub fn cmd_evaluate(matrix: &Path, cfg: &PipelineConfig) -> Result<HoldoutReport> {
    prepare(cfg)?;
    let registry = completion_methods();
    let method = method(&registry, &cfg.estimator.method)?;
    let x: LatencyMatrix = read_matrix_json(open(matrix)?).map_err(|e| data(format!("{}: {e}", matrix.display())))?;
    let r = holdout_evaluate(&x, cfg.estimator.holdout, cfg.seed, method, &cfg.estimator.completion())
        .map_err(data)?;
    write_holdout(&cfg.output_dir, &r)?;
    Ok(r)
}

#[derive(Serialize)]
struct GeoRow<'a> {
    client: IpAddr,
    status: &'static str,
    server_id: Option<&'a str>,
    lat: Option<f64>,
    lon: Option<f64>,
    distance_km: Option<f64>,
    bound_km: Option<f64>,
    reason: Option<&'a str>,
}

/// Disc geolocation of each client; writes `geolocation.csv`.
pub fn cmd_geolocate(input: &Path, cfg: &PipelineConfig) -> Result<Vec<GeoEstimate>> {
    prepare(cfg)?;
    let servers = load_servers(cfg)?;
    let mut owds = load_min_owds(input, cfg)?;
    if let Some(p) = &cfg.exclude {
        let ex = read_exclusions(p).map_err(config)?;
        owds.retain(|(c, _), _| !ex.contains(c));
    }
    let est = disc_geolocate(&owds, &servers, cfg.estimator.radius_km).map_err(config)?;

    let mut w = csv::Writer::from_writer(create(&cfg.output_dir, "geolocation.csv")?);
    for e in &est {
        let row = match &e.result {
            Located::Located {
                server_id,
                coordinate,
                distance_km,
                bound_km,
            } => GeoRow {
                client: e.client,
                status: "located",
                server_id: Some(server_id),
                lat: Some(coordinate.lat),
                lon: Some(coordinate.lon),
                distance_km: Some(*distance_km),
                bound_km: Some(*bound_km),
                reason: None,
            },
            Located::Unlocatable { reason } => GeoRow {
                client: e.client,
                status: "unlocatable",
                server_id: None,
                lat: None,
                lon: None,
                distance_km: None,
                bound_km: None,
                reason: Some(reason),
            },
        };
        w.serialize(row).map_err(data)?;
    }
    w.flush().map_err(data)?;
    Ok(est)
}

/// A group of identical clients in a simulation spec. Unset fields keep the
/// kind's defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileGroup {
    pub kind: ProfileKind,
    #[serde(default = "one")]
    pub count: usize,
    /// Index into the simulated server addresses.
    #[serde(default)]
    pub server: usize,
    /// Several server indices: each client of the group polls all of them.
    #[serde(default)]
    pub servers: Vec<usize>,
    pub true_c2s_ms: Option<f64>,
    pub true_s2c_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub offset_ms: Option<f64>,
    pub drift_ppm: Option<f64>,
    pub poll: Option<i8>,
    pub max_poll: Option<i8>,
    pub emits_gtrtt: Option<bool>,
    pub duration_s: Option<f64>,
}

fn one() -> usize {
    1
}

fn pcap() -> String {
    "pcap".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    /// Falls back to the pipeline seed.
    pub seed: Option<u64>,
    #[serde(default = "pcap")]
    pub format: String,
    pub epoch_unix_s: Option<i64>,
    #[serde(default)]
    pub profile: Vec<ProfileGroup>,
    pub geometry: Option<GeometryParams>,
}

impl SimSpec {
    pub fn profiles(&self) -> Vec<ClientProfile> {
        let mut out = Vec::new();
        let mut client = 0;
        for g in &self.profile {
            let servers = if g.servers.is_empty() { std::slice::from_ref(&g.server) } else { &g.servers[..] };
            for _ in 0..g.count {
                for &s in servers {
                    let mut p = ClientProfile::new(g.kind, client_address(client), server_address(s));
                    macro_rules! set {
                        ($($f:ident),*) => { $(if let Some(v) = g.$f { p.$f = v; })* };
                    }
                    set!(true_c2s_ms, true_s2c_ms, jitter_ms, offset_ms, drift_ppm, poll, max_poll, emits_gtrtt, duration_s);
                    out.push(p);
                }
                client += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub trace: PathBuf,
    pub clients: usize,
    pub sessions: usize,
    pub packets: usize,
    pub servers: Vec<IpAddr>,
    pub geometry: bool,
}

/// Generate a synthetic trace (plus ground truth) from a TOML spec; with a
/// `[geometry]` table, also a synthetic latency matrix.
pub fn cmd_simulate(spec_path: &Path, cfg: &PipelineConfig, format: Option<&str>) -> Result<SimulateSummary> {
    prepare(cfg)?;
    let text = fs::read_to_string(spec_path).map_err(|e| config(format!("{}: {e}", spec_path.display())))?;
    let spec: SimSpec = toml::from_str(&text).map_err(|e| config(format!("{}: {e}", spec_path.display())))?;
    let seed = spec.seed.unwrap_or(cfg.seed);
    let writers = trace_writers();
    let writer = writers.get(format.unwrap_or(&spec.format)).map_err(config)?;

    let profiles = spec.profiles();
    let sim = simulate_trace_at(&profiles, seed, spec.epoch_unix_s.unwrap_or(DEFAULT_EPOCH_UNIX_S)).map_err(config)?;
    let out = &cfg.output_dir;
    let trace = out.join(format!("trace.{}", writer.extension()));
    let mut w = create(out, &format!("trace.{}", writer.extension()))?;
    writer.write_trace(&sim.records, &mut w).map_err(data)?;
    finish(w)?;

    let mut w = create(out, "truth.jsonl")?;
    for row in &sim.truth {
        serde_json::to_writer(&mut w, row).map_err(data)?;
        w.write_all(b"\n").map_err(data)?;
    }
    finish(w)?;

    let mut servers: Vec<IpAddr> = profiles.iter().map(|p| p.server).collect();
    servers.sort();
    servers.dedup();
    let mut w = create(out, "server_addresses.txt")?;
    for s in &servers {
        writeln!(w, "{s}").map_err(data)?;
    }
    finish(w)?;

    if let Some(params) = &spec.geometry {
        let g = generate_geometry(params, seed).map_err(config)?;
        write_geometry(out, &g)?;
    }

    Ok(SimulateSummary {
        trace,
        clients: profiles.iter().map(|p| p.client).collect::<std::collections::BTreeSet<_>>().len(),
        sessions: profiles.len(),
        packets: sim.records.len(),
        servers,
        geometry: spec.geometry.is_some(),
    })
}

fn write_geometry(out: &Path, g: &GeometryInstance) -> Result<()> {
    write_matrix_json(&g.observed, create(out, "geometry_observed.json")?).map_err(data)?;
    write_matrix_csv(&g.observed.ids, &g.truth, None, create(out, "geometry_truth.csv")?).map_err(data)?;
    let metas: Vec<ServerMeta> = g
        .servers
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p {
            Point::Geo { coordinate } => Some(ServerMeta {
                id: format!("s{i}"),
                address: server_address(i),
                coordinate: *coordinate,
            }),
            Point::Plane { .. } => None,
        })
        .collect();
    if !metas.is_empty() {
        write_servers_csv(&metas, create(out, "geometry_servers.csv")?).map_err(data)?;
    }
    Ok(())
}
