//! Hold-out evaluation and disc geolocation.

use std::collections::BTreeMap;
use std::net::IpAddr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::complete::{complete_with, CompletionConfig, CompletionMethod};
use super::geo::{latency_to_distance, GeoCoordinate};
use super::matrix::{LatencyMatrix, ServerMeta};
use super::EstimatorError;
use crate::tier::MinOwd;

const MAX_HOLDOUT_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeldOutEntry {
    pub row: String,
    pub col: String,
    pub truth: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutReport {
    pub seed: u64,
    pub attempt: u64,
    pub held_out: usize,
    /// Held-out entries with a zero true value have no relative error.
    pub skipped_zero_truth: usize,
    pub entries: Vec<HeldOutEntry>,
    pub mean_rel_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl HoldoutReport {
    /// `(error, cumulative fraction)` at each observed error.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        let mut e: Vec<f64> = self.entries.iter().map(|x| x.rel_error).collect();
        e.sort_by(f64::total_cmp);
        let n = e.len() as f64;
        e.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect()
    }
}

/// Hide a seeded random `fraction` of the observed B and D entries,
/// complete, and score the predictions.
///
/// Candidates are visited in seeded random order and hidden unless that
/// would leave their row or column with `rank` or fewer observed entries,
/// which would make a rank-`rank` fit of that node unchecked by any
/// redundant measurement. If the target count cannot be reached, or the
/// method rejects the resulting mask, another stream is tried.
pub fn holdout_evaluate(
    x: &LatencyMatrix,
    fraction: f64,
    seed: u64,
    method: &dyn CompletionMethod,
    cfg: &CompletionConfig,
) -> Result<HoldoutReport, EstimatorError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(EstimatorError::InvalidInput(format!("holdout fraction {fraction} not in [0, 1)")));
    }
    let cells = x.observed_owd_cells();
    let k = (fraction * cells.len() as f64).round() as usize;
    let s = x.size();
    let off_diag = |mask: &nalgebra::DMatrix<bool>, i: usize, row: bool| {
        (0..s).filter(|&j| j != i && if row { mask[(i, j)] } else { mask[(j, i)] }).count()
    };

    for attempt in 0..MAX_HOLDOUT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let mut order = cells.clone();
        order.shuffle(&mut rng);

        let mut hidden = x.clone();
        let mut row_left: Vec<usize> = (0..s).map(|i| off_diag(&x.mask, i, true)).collect();
        let mut col_left: Vec<usize> = (0..s).map(|i| off_diag(&x.mask, i, false)).collect();
        let mut picked = Vec::with_capacity(k);
        for (i, j) in order {
            if picked.len() == k {
                break;
            }
            if row_left[i] > cfg.rank + 1 && col_left[j] > cfg.rank + 1 {
                hidden.unset(i, j);
                row_left[i] -= 1;
                col_left[j] -= 1;
                picked.push((i, j));
            }
        }
        picked.sort_unstable();
        if picked.len() < k {
            log::debug!("holdout attempt {attempt} could hide only {} of {k} entries", picked.len());
            continue;
        }
        if method.check(&hidden).is_err() {
            log::debug!("holdout attempt {attempt} left a degenerate mask, resampling");
            continue;
        }
        let out = complete_with(method, &hidden, cfg)?;
        let mut entries = Vec::with_capacity(k);
        let mut skipped = 0;
        for &(i, j) in &picked {
            let truth = x.values[(i, j)];
            let predicted = out.values[(i, j)];
            if truth == 0.0 {
                skipped += 1;
                continue;
            }
            entries.push(HeldOutEntry {
                row: x.ids[i].clone(),
                col: x.ids[j].clone(),
                truth,
                predicted,
                rel_error: (predicted - truth).abs() / truth.abs(),
            });
        }
        let mean_rel_error =
            (!entries.is_empty()).then(|| entries.iter().map(|e| e.rel_error).sum::<f64>() / entries.len() as f64);
        return Ok(HoldoutReport {
            seed,
            attempt,
            held_out: k,
            skipped_zero_truth: skipped,
            entries,
            mean_rel_error,
            iterations: out.iterations,
            converged: out.converged,
        });
    }
    Err(EstimatorError::DegenerateAfterHoldout(MAX_HOLDOUT_ATTEMPTS))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Located {
    Located {
        server_id: String,
        coordinate: GeoCoordinate,
        distance_km: f64,
        bound_km: f64,
    },
    Unlocatable {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeoEstimate {
    pub client: IpAddr,
    #[serde(flatten)]
    pub result: Located,
}

/// Place each client at the server it is provably closest to.
///
/// The smaller directional minimum to a server bounds how far the client can
/// be from it. If the nearest such bound is within `radius_km`, the client
/// takes that server's coordinates.
pub fn disc_geolocate(
    min_owds: &BTreeMap<(IpAddr, IpAddr), MinOwd>,
    servers: &[ServerMeta],
    radius_km: f64,
) -> Result<Vec<GeoEstimate>, EstimatorError> {
    if !(radius_km > 0.0) {
        return Err(EstimatorError::InvalidInput(format!("radius {radius_km} km must be > 0")));
    }
    let by_addr: BTreeMap<IpAddr, &ServerMeta> = servers.iter().map(|s| (s.address, s)).collect();
    let mut best: BTreeMap<IpAddr, Option<(f64, &ServerMeta)>> = BTreeMap::new();
    for (&(client, server), owd) in min_owds {
        let slot = best.entry(client).or_insert(None);
        let (Some(meta), Some(ms)) = (by_addr.get(&server), owd.smallest_ms()) else {
            continue;
        };
        let km = latency_to_distance(ms.max(0.0)) / 1000.0;
        if slot.is_none_or(|(d, _)| km < d) {
            *slot = Some((km, meta));
        }
    }
    Ok(best
        .into_iter()
        .map(|(client, b)| GeoEstimate {
            client,
            result: match b {
                Some((km, s)) if km <= radius_km => Located::Located {
                    server_id: s.id.clone(),
                    coordinate: s.coordinate,
                    distance_km: km,
                    bound_km: radius_km,
                },
                Some((km, s)) => Located::Unlocatable {
                    reason: format!("nearest server {} is up to {km:.1} km away, beyond {radius_km} km", s.id),
                },
                None => Located::Unlocatable {
                    reason: "no minimum OWD to a known server".into(),
                },
            },
        })
        .collect())
}
