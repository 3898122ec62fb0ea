use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use owd_core::commands::{cmd_classify, cmd_complete, cmd_evaluate, cmd_geolocate, cmd_simulate, CommandError};
use owd_core::config::PipelineConfig;
use owd_core::estimator::Symmetrize;
use owd_core::tier::Tier;

#[derive(Parser)]
#[command(name = "owdkit", version, about = "One-way delays from passive NTP captures")]
struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract OWD samples from traces and label them with precision tiers.
    Classify {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Complete the client-server latency matrix from minimum OWDs.
    Complete {
        /// min_owd.csv or a labeled samples.jsonl.
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Hold-out evaluation of a saved observed.json matrix.
    Evaluate {
        matrix: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Place clients at a nearby server when their minimum OWD allows it.
    Geolocate {
        /// min_owd.csv or a labeled samples.jsonl.
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic trace from a TOML spec.
    Simulate {
        spec: PathBuf,
        /// Trace format: pcap or jsonl.
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by all subcommands; each overrides its config key.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Server list, columns id,address,lat,lon.
    #[arg(long)]
    servers: Option<PathBuf>,
    /// Extra server address (repeatable).
    #[arg(long = "server")]
    server_addresses: Vec<IpAddr>,
    #[arg(long)]
    a_rtt: Option<PathBuf>,
    /// Client addresses to leave out, one per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    squared: bool,
    #[arg(long)]
    symmetrize: Option<Symmetrize>,
    #[arg(long)]
    min_servers: Option<usize>,
    /// Lowest tier used for minimum OWDs (0-3).
    #[arg(long, value_parser = parse_tier)]
    tier_floor: Option<Tier>,
    /// Fraction of observed entries to hold out; 0 disables.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    radius_km: Option<f64>,
}

fn parse_tier(s: &str) -> Result<Tier, String> {
    let n: u8 = s.parse().map_err(|_| format!("'{s}' is not a tier number"))?;
    Tier::try_from(n).map_err(|e| e.to_string())
}

impl Common {
    fn resolve(self) -> Result<PipelineConfig, CommandError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).map_err(|e| CommandError::Config(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        macro_rules! over {
            ($($flag:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($path).+ = v; })*
            };
        }
        over!(
            out => output_dir,
            seed => seed,
            method => estimator.method,
            rank => estimator.rank,
            tol => estimator.tol,
            max_iter => estimator.max_iter,
            symmetrize => estimator.symmetrize,
            min_servers => estimator.min_servers,
            tier_floor => estimator.tier_floor,
            holdout => estimator.holdout,
            radius_km => estimator.radius_km,
        );
        if self.servers.is_some() {
            cfg.servers = self.servers;
        }
        if self.a_rtt.is_some() {
            cfg.a_rtt = self.a_rtt;
        }
        if self.exclude.is_some() {
            cfg.exclude = self.exclude;
        }
        cfg.server_addresses.extend(self.server_addresses);
        cfg.estimator.squared |= self.squared;
        Ok(cfg)
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cmd: Command) -> Result<(), CommandError> {
    match cmd {
        Command::Classify { traces, common } => {
            let cfg = common.resolve()?;
            let s = cmd_classify(&traces, &cfg)?;
            let total = s.counts.total();
            println!("tier  samples  fraction");
            for t in Tier::ALL {
                let k = s.counts.0[t.index()];
                let f = if total == 0 { 0.0 } else { k as f64 / total as f64 };
                println!("{:<4}  {k:>7}  {f:>8.4}", t.index());
            }
            println!("total {total:>7}");
            log::info!(
                "{} datagrams, {} sessions, {} undecodable, {} outside any session",
                s.datagrams,
                s.sessions,
                s.undecodable,
                s.ignored
            );
            report_dir(&cfg.output_dir);
        }
        Command::Complete { input, common } => {
            let cfg = common.resolve()?;
            print_json(&cmd_complete(&input, &cfg)?);
            report_dir(&cfg.output_dir);
        }
        Command::Evaluate { matrix, common } => {
            let cfg = common.resolve()?;
            let r = cmd_evaluate(&matrix, &cfg)?;
            match r.mean_rel_error {
                Some(e) => println!("held out {} entries, mean relative error {e:.6}", r.held_out),
                None => println!("held out {} entries", r.held_out),
            }
            report_dir(&cfg.output_dir);
        }
        Command::Geolocate { input, common } => {
            let cfg = common.resolve()?;
            let est = cmd_geolocate(&input, &cfg)?;
            let located = est
                .iter()
                .filter(|e| matches!(e.result, owd_core::estimator::Located::Located { .. }))
                .count();
            println!("located {located} of {} clients", est.len());
            report_dir(&cfg.output_dir);
        }
        Command::Simulate { spec, format, common } => {
            let cfg = common.resolve()?;
            print_json(&cmd_simulate(&spec, &cfg, format.as_deref())?);
        }
    }
    Ok(())
}

fn report_dir(dir: &Path) {
    log::info!("outputs written to {}", dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Parsing failed, so the flag is looked up by hand.
            if std::env::args().any(|a| a == "--json-errors") {
                let msg = e.kind().as_str().map_or_else(|| e.to_string(), str::to_string);
                eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg, "exit_code": 1 }));
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json_errors {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() })
                );
            } else {
                eprintln!("owdkit: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
