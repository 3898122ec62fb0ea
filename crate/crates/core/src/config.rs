//! Declarative pipeline configuration, loaded from TOML.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! servers = "servers.csv"          # id,address,lat,lon
//! server_addresses = ["192.0.2.9"] # extra servers without coordinates
//! exclude = "exclude.txt"          # client addresses, one per line
//! a_rtt = "a_rtt.csv"
//!
//! [session]
//! t1_source = "prefer-server-receive"
//! rotation_depth = 4
//!
//! [classifier]
//! tier_boundary_ms = 1000.0
//! ewma_alpha_grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
//! sigma_k = 1.0
//!
//! [estimator]
//! method = "ihtsvd"
//! rank = 4
//! tol = 1e-9
//! max_iter = 10000
//! pinv_cutoff = 1e-10
//! squared = false
//! symmetrize = "none"
//! min_servers = 4
//! tier_floor = 3
//! holdout = 0.1
//! radius_km = 200.0
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeSet;
use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimator::{CompletionConfig, Symmetrize};
use crate::session::SessionConfig;
use crate::tier::{ClassifierConfig, Tier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: String,
    pub rank: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub pinv_cutoff: f64,
    pub squared: bool,
    pub symmetrize: Symmetrize,
    pub min_servers: usize,
    pub tier_floor: Tier,
    pub holdout: f64,
    pub radius_km: f64,
}

impl EstimatorConfig {
    pub fn completion(&self) -> CompletionConfig {
        CompletionConfig {
            rank: self.rank,
            tol: self.tol,
            max_iter: self.max_iter,
            pinv_cutoff: self.pinv_cutoff,
            squared: self.squared,
        }
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let c = CompletionConfig::default();
        Self {
            method: "ihtsvd".into(),
            rank: c.rank,
            tol: c.tol,
            max_iter: c.max_iter,
            pinv_cutoff: c.pinv_cutoff,
            squared: c.squared,
            symmetrize: Symmetrize::None,
            min_servers: 4,
            tier_floor: Tier::Tier3,
            holdout: 0.1,
            radius_km: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub servers: Option<PathBuf>,
    pub server_addresses: Vec<IpAddr>,
    pub exclude: Option<PathBuf>,
    pub a_rtt: Option<PathBuf>,
    pub session: SessionConfig,
    pub classifier: ClassifierConfig,
    pub estimator: EstimatorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            servers: None,
            server_addresses: Vec::new(),
            exclude: None,
            a_rtt: None,
            session: SessionConfig::default(),
            classifier: ClassifierConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.servers, &mut cfg.exclude, &mut cfg.a_rtt].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [&self.servers, &self.exclude, &self.a_rtt].into_iter().flatten() {
            if !p.is_file() {
                return Err(ConfigError(format!("referenced file {} does not exist", p.display())));
            }
        }
        self.classifier.validate().map_err(|e| ConfigError(e.to_string()))?;
        let e = &self.estimator;
        e.completion().validate().map_err(|e| ConfigError(e.to_string()))?;
        if e.min_servers == 0 {
            return Err(ConfigError("min_servers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&e.holdout) {
            return Err(ConfigError(format!("holdout {} not in [0, 1)", e.holdout)));
        }
        if !(e.radius_km > 0.0) {
            return Err(ConfigError(format!("radius_km {} must be > 0", e.radius_km)));
        }
        if self.session.rotation_depth == 0 {
            return Err(ConfigError("rotation_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// One address per line; blank lines and `#` comments are ignored.
pub fn read_exclusions(path: &Path) -> Result<BTreeSet<IpAddr>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse()
                .map_err(|_| ConfigError(format!("{}:{}: bad address '{l}'", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_keys_parse() {
        let doc = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: PipelineConfig = toml::from_str(&doc).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.estimator.rank, 4);
        assert_eq!(cfg.estimator.tier_floor, Tier::Tier3);
        assert_eq!(cfg.server_addresses.len(), 1);
    }

    #[test]
    fn defaults_and_unknown_keys() {
        let cfg: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<PipelineConfig>("[estimator]\nrank = 3\nwat = 2").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.estimator.holdout = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            servers: Some("/nonexistent/servers.csv".into()),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.txt");
        fs::write(&p, "# mobile\n10.0.0.1\n\n2001:db8::5  # lte\n").unwrap();
        assert_eq!(read_exclusions(&p).unwrap().len(), 2);
        fs::write(&p, "nope\n").unwrap();
        assert!(read_exclusions(&p).is_err());
    }
}
