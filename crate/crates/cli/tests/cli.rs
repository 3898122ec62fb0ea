use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SERVERS: usize = 7;

fn owdkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owdkit"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Writes a spec where every client polls all servers, plus the matching
/// servers.csv. Clients in the first group sit next to their servers.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let mut spec = String::from("seed = 5\nformat = \"jsonl\"\n");
    let all: Vec<String> = (0..SERVERS).map(|i| i.to_string()).collect();
    for (c2s, s2c) in [(0.2, 0.3), (6.0, 7.0), (12.0, 11.0), (20.0, 24.0)] {
        spec += &format!(
            "\n[[profile]]\nkind = \"well-sync-constant\"\ncount = 2\nservers = [{}]\n\
             true_c2s_ms = {c2s}\ntrue_s2c_ms = {s2c}\njitter_ms = 1.0\nduration_s = 1800\n",
            all.join(", ")
        );
    }
    let spec_path = root.join("spec.toml");
    fs::write(&spec_path, spec).unwrap();

    let mut csv = String::from("id,address,lat,lon\n");
    for i in 0..SERVERS {
        csv += &format!("s{i},192.0.2.{},{},{}\n", i + 1, 32.0 + 2.0 * i as f64, -120.0 + 6.0 * i as f64);
    }
    let servers = root.join("servers.csv");
    fs::write(&servers, csv).unwrap();
    (spec_path, servers)
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, servers) = fixture(root);
    let sim_dir = root.join("sim");
    let out = root.join("out");

    let summary: serde_json::Value =
        serde_json::from_str(&ok(&owdkit(&["simulate", p(&spec), "--out", p(&sim_dir)]))).unwrap();
    assert_eq!(summary["clients"], 8);
    assert_eq!(summary["sessions"], 8 * SERVERS);
    let trace = sim_dir.join("trace.jsonl");
    assert!(trace.exists());
    assert_eq!(read(&sim_dir.join("server_addresses.txt")).lines().count(), SERVERS);

    let table = ok(&owdkit(&["classify", p(&trace), "--servers", p(&servers), "--out", p(&out)]));
    assert!(table.starts_with("tier  samples  fraction"));
    for f in ["samples.jsonl", "tiers.csv", "sessions.csv", "min_owd.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(read(&out.join("min_owd.csv")).lines().count(), 1 + 8 * SERVERS);

    let min_owd = out.join("min_owd.csv");
    let common = ["--servers", p(&servers), "--out", p(&out), "--method", "closed-form", "--seed", "3"];
    let done: serde_json::Value =
        serde_json::from_str(&ok(&owdkit(&[&["complete", p(&min_owd)][..], &common].concat()))).unwrap();
    assert_eq!(done["servers"], SERVERS);
    assert_eq!(done["clients"], 8);
    assert!(done["holdout_mean_rel_error"].is_number());
    let completed = read(&out.join("completed.csv"));
    assert_eq!(completed.lines().count(), 1 + SERVERS + 8);
    assert!(completed.lines().skip(1).all(|l| l.split(',').skip(1).all(|v| !v.is_empty())));

    let eval = ok(&owdkit(&[&["evaluate", p(&out.join("observed.json"))][..], &common].concat()));
    assert!(eval.starts_with("held out "), "{eval}");
    assert!(out.join("holdout_cdf.csv").exists());

    let geo = ok(&owdkit(&["geolocate", p(&min_owd), "--servers", p(&servers), "--out", p(&out)]));
    assert_eq!(geo.trim(), "located 2 of 8 clients");
    let rows = read(&out.join("geolocation.csv"));
    assert!(rows.starts_with("client,status,server_id,lat,lon,distance_km,bound_km,reason"));
    assert_eq!(rows.lines().count(), 9);
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, servers) = fixture(root);
    let mut seen = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        ok(&owdkit(&["simulate", p(&spec), "--out", p(&dir)]));
        ok(&owdkit(&["classify", p(&dir.join("trace.jsonl")), "--servers", p(&servers), "--out", p(&dir)]));
        let min_owd = dir.join("min_owd.csv");
        ok(&owdkit(&["complete", p(&min_owd), "--servers", p(&servers), "--out", p(&dir), "--method", "closed-form"]));
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
            .collect();
        files.sort();
        seen.push(files);
    }
    assert!(seen[0].len() >= 10);
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn pcap_and_jsonl_traces_classify_alike() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, servers) = fixture(root);
    let mut tables = Vec::new();
    for format in ["pcap", "jsonl"] {
        let dir = root.join(format);
        ok(&owdkit(&["simulate", p(&spec), "--format", format, "--out", p(&dir)]));
        let trace = dir.join(format!("trace.{format}"));
        tables.push(ok(&owdkit(&["classify", p(&trace), "--servers", p(&servers), "--out", p(&dir)])));
        tables.push(read(&dir.join("min_owd.csv")));
    }
    assert_eq!(tables[0], tables[2]);
    assert_eq!(tables[1], tables[3]);
}

#[test]
fn server_flags_stand_in_for_a_server_list() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, _) = fixture(root);
    ok(&owdkit(&["simulate", p(&spec), "--out", p(root)]));
    let mut args = vec!["classify".to_string(), p(&root.join("trace.jsonl")).to_string()];
    args.extend(["--out".into(), p(&root.join("flags")).into()]);
    for line in read(&root.join("server_addresses.txt")).lines() {
        args.extend(["--server".into(), line.to_string()]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&owdkit(&args));
    assert_eq!(read(&root.join("flags/min_owd.csv")).lines().count(), 1 + 8 * SERVERS);
}

#[test]
fn config_file_and_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, _) = fixture(root);
    ok(&owdkit(&["simulate", p(&spec), "--out", p(root)]));
    fs::write(
        root.join("run.toml"),
        "output_dir = \"from-config\"\nservers = \"servers.csv\"\n\n[estimator]\nmethod = \"closed-form\"\nholdout = 0.0\n",
    )
    .unwrap();
    let cfg = root.join("run.toml");
    ok(&owdkit(&["classify", p(&root.join("trace.jsonl")), "--config", p(&cfg)]));
    let min_owd = root.join("from-config/min_owd.csv");
    assert!(min_owd.exists());

    let done: serde_json::Value =
        serde_json::from_str(&ok(&owdkit(&["complete", p(&min_owd), "--config", p(&cfg)]))).unwrap();
    assert_eq!(done["method"], "closed-form");
    assert!(done["holdout_mean_rel_error"].is_null());

    let over = root.join("override");
    let done: serde_json::Value = serde_json::from_str(&ok(&owdkit(&[
        "complete",
        p(&min_owd),
        "--config",
        p(&cfg),
        "--holdout",
        "0.2",
        "--out",
        p(&over),
    ])))
    .unwrap();
    assert!(done["holdout_mean_rel_error"].is_number());
    assert!(over.join("holdout.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (spec, servers) = fixture(root);
    ok(&owdkit(&["simulate", p(&spec), "--out", p(root)]));
    let min_owd_dir = root.join("c");
    ok(&owdkit(&["classify", p(&root.join("trace.jsonl")), "--servers", p(&servers), "--out", p(&min_owd_dir)]));
    let min_owd = min_owd_dir.join("min_owd.csv");

    assert_eq!(owdkit(&["--help"]).status.code(), Some(0));
    assert_eq!(owdkit(&["frobnicate"]).status.code(), Some(1));
    // No server list.
    assert_eq!(owdkit(&["complete", p(&min_owd), "--out", p(root)]).status.code(), Some(1));
    assert_eq!(owdkit(&["complete", p(&min_owd), "--servers", "missing.csv"]).status.code(), Some(1));
    assert_eq!(
        owdkit(&["complete", p(&min_owd), "--servers", p(&servers), "--method", "magic", "--out", p(root)])
            .status
            .code(),
        Some(1)
    );

    // Parses, but three servers are too few to complete.
    let few = root.join("few.csv");
    fs::write(&few, read(&servers).lines().take(4).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let out = owdkit(&["complete", p(&min_owd), "--servers", p(&few), "--out", p(root)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("owdkit: data error"));
}

#[test]
fn json_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = owdkit(&["--json-errors", "complete", "nowhere.csv", "--out", p(root)]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 1);
    assert!(err["message"].as_str().unwrap().len() > 0);

    let out = owdkit(&["--json-errors", "complete"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}
