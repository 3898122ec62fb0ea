//! The block latency matrix and its A and B blocks.
//!
//! Layout for `m` servers and `n` clients, all values in milliseconds:
//!
//! ```text
//!        servers   clients
//!      +---------+---------+
//!      |    A    |    B    |   B[i][j]: server i -> client j (s2c)
//!      +---------+---------+
//!      |    D    |    C    |   D[j][i]: client j -> server i (c2s)
//!      +---------+---------+
//! ```
//!
//! `C` starts unobserved and is what completion predicts.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::geo::{distance, geo_latency, GeoCoordinate};
use super::EstimatorError;
use crate::tier::MinOwd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMeta {
    pub id: String,
    pub address: IpAddr,
    pub coordinate: GeoCoordinate,
}

pub fn check_unique_ids(servers: &[ServerMeta]) -> Result<(), EstimatorError> {
    let mut seen = BTreeSet::new();
    for s in servers {
        if !seen.insert(s.id.as_str()) {
            return Err(EstimatorError::InvalidInput(format!("duplicate server id '{}'", s.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    pub m: usize,
    pub n: usize,
    pub ids: Vec<String>,
    /// Unobserved cells hold 0.0 and are never read.
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl LatencyMatrix {
    /// Diagonal observed at zero, everything else unobserved.
    pub fn empty(m: usize, ids: Vec<String>) -> Self {
        let size = ids.len();
        assert!(m <= size);
        Self {
            m,
            n: size - m,
            ids,
            values: DMatrix::zeros(size, size),
            mask: DMatrix::from_fn(size, size, |i, j| i == j),
        }
    }

    pub fn size(&self) -> usize {
        self.m + self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.mask[(i, j)].then(|| self.values[(i, j)])
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[(i, j)] = v;
        self.mask[(i, j)] = true;
    }

    pub fn unset(&mut self, i: usize, j: usize) {
        self.values[(i, j)] = 0.0;
        self.mask[(i, j)] = false;
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    pub fn is_block_a(&self, i: usize, j: usize) -> bool {
        i < self.m && j < self.m
    }

    pub fn is_block_c(&self, i: usize, j: usize) -> bool {
        i >= self.m && j >= self.m
    }

    /// Observed off-diagonal cells outside A, i.e. the measured B and D entries.
    pub fn observed_owd_cells(&self) -> Vec<(usize, usize)> {
        let s = self.size();
        (0..s)
            .flat_map(|i| (0..s).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.mask[(i, j)] && !self.is_block_a(i, j) && !self.is_block_c(i, j))
            .collect()
    }

    /// Every row and column needs an observed entry off the diagonal.
    pub fn check_mask(&self) -> Result<(), EstimatorError> {
        let s = self.size();
        for i in 0..s {
            let row = (0..s).any(|j| j != i && self.mask[(i, j)]);
            let col = (0..s).any(|j| j != i && self.mask[(j, i)]);
            if !row || !col {
                return Err(EstimatorError::MaskDegenerate(self.ids[i].clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionCoeffs {
    pub beta0: f64,
    pub beta1: f64,
}

impl RegressionCoeffs {
    pub const IDENTITY: Self = Self { beta0: 0.0, beta1: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        self.beta0 + self.beta1 * x
    }
}

/// Ordinary least squares `y = beta0 + beta1 x`. None for fewer than two
/// points or no spread in `x`.
pub fn fit_ols(points: &[(f64, f64)]) -> Option<RegressionCoeffs> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let beta1 = sxy / sxx;
    let c = RegressionCoeffs { beta0: my - beta1 * mx, beta1 };
    (c.beta0.is_finite() && c.beta1.is_finite()).then_some(c)
}

pub fn geo_matrix(servers: &[ServerMeta]) -> DMatrix<f64> {
    let m = servers.len();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let d = geo_latency(distance(servers[i].coordinate, servers[j].coordinate).meters);
            g[(i, j)] = d;
            g[(j, i)] = d;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerBlock {
    pub a: DMatrix<f64>,
    pub a_geo: DMatrix<f64>,
    /// None when too few pairs were observed and `A_geo` was used as is.
    pub coeffs: Option<RegressionCoeffs>,
    pub filled: usize,
    /// Observed entries raised to the propagation floor.
    pub clamped_observed: usize,
}

/// Complete the server-server block from partial ping data and geography.
///
/// `a_rtt` holds half the minimum RTT per pair; `None` marks a missing pair.
/// A pair observed in one orientation only is used for both. Missing pairs
/// are predicted by regressing observed values on `A_geo`. Every entry is
/// clamped to at least `A_geo`.
pub fn build_a(servers: &[ServerMeta], a_rtt: &DMatrix<Option<f64>>) -> Result<ServerBlock, EstimatorError> {
    let m = servers.len();
    if m < 2 {
        return Err(EstimatorError::InvalidInput(format!("need at least 2 servers, got {m}")));
    }
    if a_rtt.nrows() != m || a_rtt.ncols() != m {
        return Err(EstimatorError::InvalidInput(format!(
            "a_rtt is {}x{}, expected {m}x{m}",
            a_rtt.nrows(),
            a_rtt.ncols()
        )));
    }
    let a_geo = geo_matrix(servers);

    let mut pair = BTreeMap::new();
    for i in 0..m {
        for j in i + 1..m {
            let v = match (a_rtt[(i, j)], a_rtt[(j, i)]) {
                (Some(x), Some(y)) if (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1.0) => {
                    return Err(EstimatorError::InvalidInput(format!(
                        "a_rtt not symmetric at ({}, {}): {x} vs {y}",
                        servers[i].id, servers[j].id
                    )))
                }
                (Some(x), _) | (None, Some(x)) => x,
                (None, None) => continue,
            };
            if !(v.is_finite() && v >= 0.0) {
                return Err(EstimatorError::InvalidInput(format!(
                    "a_rtt entry ({}, {}) = {v}",
                    servers[i].id, servers[j].id
                )));
            }
            pair.insert((i, j), v);
        }
    }

    let points: Vec<(f64, f64)> = pair.iter().map(|(&(i, j), &y)| (a_geo[(i, j)], y)).collect();
    let coeffs = fit_ols(&points);
    if coeffs.is_none() {
        log::warn!(
            "{} observed server pairs: too few for regression, using geographic latencies",
            points.len()
        );
    }
    let scale = coeffs.unwrap_or(RegressionCoeffs::IDENTITY);

    let mut a = DMatrix::zeros(m, m);
    let (mut filled, mut clamped_observed) = (0, 0);
    for i in 0..m {
        for j in i + 1..m {
            let floor = a_geo[(i, j)];
            let v = match pair.get(&(i, j)) {
                Some(&y) => {
                    if y < floor {
                        clamped_observed += 1;
                    }
                    y.max(floor)
                }
                None => {
                    filled += 1;
                    scale.apply(floor).max(floor)
                }
            };
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    if clamped_observed > 0 {
        log::warn!("{clamped_observed} observed server pairs below the propagation floor were raised");
    }
    Ok(ServerBlock {
        a,
        a_geo,
        coeffs,
        filled,
        clamped_observed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetrize {
    #[default]
    None,
    Min,
    Mean,
}

impl std::str::FromStr for Symmetrize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown symmetrize mode '{other}' (none, min, mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembleConfig {
    pub min_servers: usize,
    pub excluded: BTreeSet<IpAddr>,
    pub symmetrize: Symmetrize,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            min_servers: 4,
            excluded: BTreeSet::new(),
            symmetrize: Symmetrize::None,
        }
    }
}

/// Lay out A and the clients' minimum OWDs as a block matrix.
///
/// Clients are kept when they have a usable minimum to at least
/// `min_servers` of the given servers and are not excluded. Client ids are
/// their addresses; order is address order.
pub fn assemble_x(
    a: &DMatrix<f64>,
    servers: &[ServerMeta],
    min_owds: &BTreeMap<(IpAddr, IpAddr), MinOwd>,
    cfg: &AssembleConfig,
) -> Result<LatencyMatrix, EstimatorError> {
    let m = servers.len();
    if a.nrows() != m || a.ncols() != m {
        return Err(EstimatorError::InvalidInput("A does not match the server list".into()));
    }
    let index: BTreeMap<IpAddr, usize> = servers.iter().enumerate().map(|(i, s)| (s.address, i)).collect();
    let usable = |v: Option<f64>| v.filter(|x| x.is_finite() && *x >= 0.0);

    let mut per_client: BTreeMap<IpAddr, BTreeMap<usize, (Option<f64>, Option<f64>)>> = BTreeMap::new();
    for (&(client, server), owd) in min_owds {
        let Some(&si) = index.get(&server) else { continue };
        if cfg.excluded.contains(&client) {
            continue;
        }
        let (c2s, s2c) = (usable(owd.c2s_ms), usable(owd.s2c_ms));
        if c2s.is_none() && s2c.is_none() {
            continue;
        }
        per_client.entry(client).or_default().insert(si, (c2s, s2c));
    }
    per_client.retain(|_, row| row.len() >= cfg.min_servers);
    if per_client.is_empty() {
        return Err(EstimatorError::NoEligibleClients);
    }

    let ids = servers
        .iter()
        .map(|s| s.id.clone())
        .chain(per_client.keys().map(|c| c.to_string()))
        .collect();
    let mut x = LatencyMatrix::empty(m, ids);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                x.set(i, j, a[(i, j)]);
            }
        }
    }
    for (cj, row) in per_client.values().enumerate() {
        let col = m + cj;
        for (&si, &(c2s, s2c)) in row {
            let (c2s, s2c) = match (cfg.symmetrize, c2s, s2c) {
                (Symmetrize::None, c, s) => (c, s),
                (Symmetrize::Min, Some(c), Some(s)) => (Some(c.min(s)), Some(c.min(s))),
                (Symmetrize::Mean, Some(c), Some(s)) => (Some((c + s) / 2.0), Some((c + s) / 2.0)),
                (_, c, s) => (c.or(s), s.or(c)),
            };
            if let Some(v) = s2c {
                x.set(si, col, v);
            }
            if let Some(v) = c2s {
                x.set(col, si, v);
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    pub(crate) fn server(i: u8, lat: f64, lon: f64) -> ServerMeta {
        ServerMeta {
            id: format!("s{i}"),
            address: IpAddr::V4(Ipv4Addr::new(192, 0, 2, i)),
            coordinate: GeoCoordinate::new(lat, lon).unwrap(),
        }
    }

    fn four() -> Vec<ServerMeta> {
        vec![
            server(1, 40.0, -74.0),
            server(2, 34.0, -118.0),
            server(3, 41.9, -87.6),
            server(4, 29.8, -95.4),
        ]
    }

    fn client(i: u8) -> IpAddr {
        IpAddr::V4(Ipv4Addr::new(10, 0, 0, i))
    }

    #[test]
    fn ols_exact_line() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 3.0 * i as f64 - 1.0)).collect();
        let c = fit_ols(&pts).unwrap();
        assert!((c.beta0 + 1.0).abs() < 1e-12 && (c.beta1 - 3.0).abs() < 1e-12);
        assert!(fit_ols(&pts[..1]).is_none());
        assert!(fit_ols(&[(1.0, 2.0), (1.0, 3.0)]).is_none());
    }

    #[test]
    fn build_a_fully_observed_is_verbatim() {
        let s = four();
        let g = geo_matrix(&s);
        let rtt = DMatrix::from_fn(4, 4, |i, j| Some(if i == j { 0.0 } else { g[(i, j)] * 1.5 + 2.0 }));
        let out = build_a(&s, &rtt).unwrap();
        assert_eq!(out.filled, 0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(out.a[(i, j)], rtt[(i, j)].unwrap());
            }
        }
    }

    #[test]
    fn build_a_insufficient_uses_geo() {
        let s = four();
        let mut rtt = DMatrix::from_element(4, 4, None);
        rtt[(0, 1)] = Some(100.0);
        let out = build_a(&s, &rtt).unwrap();
        assert!(out.coeffs.is_none());
        assert_eq!(out.a[(0, 1)], 100.0);
        assert_eq!(out.a[(2, 3)], out.a_geo[(2, 3)]);
    }

    #[test]
    fn build_a_rejects_asymmetry() {
        let s = four();
        let mut rtt = DMatrix::from_element(4, 4, None);
        rtt[(0, 1)] = Some(10.0);
        rtt[(1, 0)] = Some(12.0);
        assert!(build_a(&s, &rtt).is_err());
    }

    #[test]
    fn assemble_counts() {
        let s = four();
        let a = geo_matrix(&s);
        let mut owds = BTreeMap::new();
        for sv in &s {
            owds.insert((client(1), sv.address), MinOwd { c2s_ms: Some(5.0), s2c_ms: Some(6.0) });
        }
        for sv in &s[..3] {
            owds.insert((client(2), sv.address), MinOwd { c2s_ms: Some(5.0), s2c_ms: Some(6.0) });
        }
        let x = assemble_x(&a, &s, &owds, &AssembleConfig::default()).unwrap();
        assert_eq!((x.m, x.n), (4, 1));
        assert_eq!(x.observed_owd_cells().len(), 8);
        assert_eq!(x.get(0, 4), Some(6.0));
        assert_eq!(x.get(4, 0), Some(5.0));
        assert!(x.mask[(4, 4)]);
        assert_eq!(x.ids[4], "10.0.0.1");
    }

    #[test]
    fn assemble_no_eligible() {
        let s = four();
        let a = geo_matrix(&s);
        let mut owds = BTreeMap::new();
        for sv in &s[..3] {
            owds.insert((client(1), sv.address), MinOwd { c2s_ms: Some(5.0), s2c_ms: None });
        }
        assert_eq!(
            assemble_x(&a, &s, &owds, &AssembleConfig::default()),
            Err(EstimatorError::NoEligibleClients)
        );
        let mut cfg = AssembleConfig { min_servers: 3, ..Default::default() };
        assert!(assemble_x(&a, &s, &owds, &cfg).is_ok());
        cfg.excluded.insert(client(1));
        assert_eq!(assemble_x(&a, &s, &owds, &cfg), Err(EstimatorError::NoEligibleClients));
    }

    #[test]
    fn symmetrize_modes() {
        let s = four();
        let a = geo_matrix(&s);
        let mut owds = BTreeMap::new();
        for (k, sv) in s.iter().enumerate() {
            let s2c = (k != 0).then_some(8.0);
            owds.insert((client(1), sv.address), MinOwd { c2s_ms: Some(4.0), s2c_ms: s2c });
        }
        let run = |mode| {
            let cfg = AssembleConfig { symmetrize: mode, ..Default::default() };
            assemble_x(&a, &s, &owds, &cfg).unwrap()
        };
        let x = run(Symmetrize::None);
        assert_eq!(x.get(0, 4), None);
        assert_eq!(x.get(1, 4), Some(8.0));
        let x = run(Symmetrize::Min);
        assert_eq!((x.get(1, 4), x.get(4, 1)), (Some(4.0), Some(4.0)));
        assert_eq!(x.get(0, 4), Some(4.0));
        let x = run(Symmetrize::Mean);
        assert_eq!((x.get(1, 4), x.get(4, 1)), (Some(6.0), Some(6.0)));
    }

    #[test]
    fn mask_check() {
        let mut x = LatencyMatrix::empty(2, vec!["a".into(), "b".into(), "c".into()]);
        x.set(0, 1, 1.0);
        x.set(1, 0, 1.0);
        assert!(matches!(x.check_mask(), Err(EstimatorError::MaskDegenerate(id)) if id == "a" || id == "c"));
        x.set(2, 0, 1.0);
        x.set(0, 2, 1.0);
        assert!(x.check_mask().is_ok());
    }
}
