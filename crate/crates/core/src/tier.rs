//! Precision tiers for OWD samples.
//!
//! Sessions are split by polling behaviour. Non-constant pollers are judged
//! run by run: a run of exactly `N = ceil(30 / P)` samples at exponent `P`
//! followed by a larger exponent is what the client's own selection logic
//! needs before backing off, so those samples are trusted. Constant pollers
//! are filtered against the client-reported gtRTT when present, else against
//! mean plus one standard deviation. Trusted samples are EWMA-smoothed and
//! become tier 3; everything rejected falls to tier 2 or tier 1 depending on
//! magnitude; one-shot traffic is tier 0 or tier 1.

use std::collections::BTreeMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{detect_one_shot, ClientSession, OwdSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TierError {
    #[error("invalid poll exponent {0}")]
    InvalidPoll(i32),
    #[error("need at least 2 samples with both directions, got {0}")]
    TooFewSamples(usize),
    #[error("no samples at or above {floor} for {client} -> {server}")]
    NoQualifyingSamples { client: IpAddr, server: IpAddr, floor: Tier },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Tier {
    Tier0 = 0,
    Tier1 = 1,
    Tier2 = 2,
    Tier3 = 3,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Tier0, Tier::Tier1, Tier::Tier2, Tier::Tier3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Tier> for u8 {
    fn from(t: Tier) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for Tier {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Tier::ALL.get(v as usize).copied().ok_or_else(|| format!("tier {v} out of range"))
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tier {}", *self as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PollingKind {
    Constant,
    NonConstant,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub tier_boundary_ms: f64,
    pub ewma_alpha_grid: Vec<f64>,
    pub sigma_k: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            tier_boundary_ms: 1000.0,
            ewma_alpha_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sigma_k: 1.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), TierError> {
        if !(self.tier_boundary_ms > 0.0) {
            return Err(TierError::InvalidConfig("tier_boundary_ms must be > 0".into()));
        }
        if self.ewma_alpha_grid.is_empty() {
            return Err(TierError::InvalidConfig("ewma_alpha_grid is empty".into()));
        }
        if self.ewma_alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(TierError::InvalidConfig("ewma alphas must lie in (0, 1)".into()));
        }
        if !(self.sigma_k >= 0.0) {
            return Err(TierError::InvalidConfig("sigma_k must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn classify_polling(session: &ClientSession) -> PollingKind {
    if detect_one_shot(session) {
        return PollingKind::OneShot;
    }
    let first = session.samples[0].poll;
    if session.samples.iter().all(|s| s.poll == first) {
        PollingKind::Constant
    } else {
        PollingKind::NonConstant
    }
}

/// Maximal run of samples sharing one poll exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollRun {
    pub poll: i8,
    pub start: usize,
    pub len: usize,
    pub next_poll: Option<i8>,
}

impl PollRun {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub fn segment_runs(samples: &[OwdSample]) -> Vec<PollRun> {
    let mut runs: Vec<PollRun> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.poll == s.poll => r.len += 1,
            _ => {
                if let Some(r) = runs.last_mut() {
                    r.next_poll = Some(s.poll);
                }
                runs.push(PollRun {
                    poll: s.poll,
                    start: i,
                    len: 1,
                    next_poll: None,
                });
            }
        }
    }
    runs
}

/// Samples a client collects at exponent `poll` before it may change interval.
pub fn required_samples(poll: i32) -> Result<usize, TierError> {
    if poll <= 0 {
        return Err(TierError::InvalidPoll(poll));
    }
    Ok(30usize.div_ceil(poll as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunVerdict {
    Accept,
    /// Fewer than N samples: clock going to a bad state.
    TooShort,
    /// Exactly N samples, then a smaller exponent.
    PollDecreased,
    /// More than N samples: clock oscillating.
    Oscillating,
    /// Exactly N samples at the end of the trace; no increase observed.
    Unconfirmed,
}

pub fn apply_run_rule(run: &PollRun) -> Result<RunVerdict, TierError> {
    let n = required_samples(run.poll as i32)?;
    Ok(if run.len < n {
        RunVerdict::TooShort
    } else if run.len > n {
        RunVerdict::Oscillating
    } else {
        match run.next_poll {
            Some(next) if next > run.poll => RunVerdict::Accept,
            Some(_) => RunVerdict::PollDecreased,
            None => RunVerdict::Unconfirmed,
        }
    })
}

/// Sub-physical (non-positive) OWDs come from clocks that lead or lag their
/// reference and are never trusted.
fn positive(s: &OwdSample) -> bool {
    s.c2s.is_some_and(|v| v > 0.0) && s.s2c.is_none_or(|v| v > 0.0)
}

/// Keep samples whose OWD sum fits inside their gtRTT. Samples missing a
/// direction or a gtRTT cannot be checked and are rejected.
pub fn apply_gtrtt_filter(samples: &[OwdSample]) -> Vec<bool> {
    samples
        .iter()
        .map(|s| match (s.c2s, s.s2c, s.gt_rtt) {
            (Some(c), Some(d), Some(g)) => c > 0.0 && d > 0.0 && c + d <= g,
            _ => false,
        })
        .collect()
}

/// Mean and sample standard deviation, shifted by the first value so that
/// constant series give an exact mean and zero spread.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let shift = xs[0];
    let n = xs.len() as f64;
    let (s1, s2) = xs.iter().fold((0.0, 0.0), |(a, b), x| {
        let d = x - shift;
        (a + d, b + d * d)
    });
    let var = ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0);
    (shift + s1 / n, var.sqrt())
}

/// Per direction, keep samples at or below `mean + k·σ`; a sample passes only
/// if both directions pass.
pub fn apply_mean_sigma_filter(samples: &[OwdSample], k: f64) -> Result<Vec<bool>, TierError> {
    let both: Vec<(f64, f64)> = samples.iter().filter_map(|s| Some((s.c2s?, s.s2c?))).collect();
    if both.len() < 2 {
        return Err(TierError::TooFewSamples(both.len()));
    }
    let c: Vec<f64> = both.iter().map(|p| p.0).collect();
    let d: Vec<f64> = both.iter().map(|p| p.1).collect();
    let (mc, sc) = mean_std(&c);
    let (md, sd) = mean_std(&d);
    let (lim_c, lim_d) = (mc + k * sc, md + k * sd);
    Ok(samples
        .iter()
        .map(|s| match (s.c2s, s.s2c) {
            (Some(c), Some(d)) => c <= lim_c && d <= lim_d && c > 0.0 && d > 0.0,
            _ => false,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ewma {
    pub alpha: f64,
    pub mse: f64,
    pub smoothed: Vec<f64>,
}

fn ewma_series(xs: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut y = xs[0];
    out.push(y);
    for &x in &xs[1..] {
        y += alpha * (x - y);
        out.push(y);
    }
    out
}

/// One-step-ahead prediction error of the smoothed series.
fn ewma_mse(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let sum: f64 = (1..xs.len()).map(|i| (ys[i - 1] - xs[i]).powi(2)).sum();
    sum / (xs.len() - 1) as f64
}

/// EWMA with the grid α minimizing one-step-ahead MSE; ties go to the
/// smaller α. Panics on an empty series or grid.
pub fn smooth_ewma(xs: &[f64], grid: &[f64]) -> Ewma {
    assert!(!xs.is_empty(), "empty series");
    let mut alphas = grid.to_vec();
    alphas.sort_by(f64::total_cmp);
    let mut best: Option<Ewma> = None;
    for alpha in alphas {
        let smoothed = ewma_series(xs, alpha);
        let mse = ewma_mse(xs, &smoothed);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(Ewma { alpha, mse, smoothed });
        }
    }
    best.expect("empty alpha grid")
}

/// What classification did to one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub kind: PollingKind,
    pub alpha_c2s: Option<f64>,
    pub alpha_s2c: Option<f64>,
    /// Samples dropped from the run rule because their exponent was invalid.
    pub invalid_poll_samples: usize,
}

/// Label every sample of `session` with exactly one tier.
pub fn assign_tiers(session: &mut ClientSession, cfg: &ClassifierConfig) -> Labeling {
    let n = session.samples.len();
    if n == 0 {
        return Labeling {
            kind: PollingKind::OneShot,
            alpha_c2s: None,
            alpha_s2c: None,
            invalid_poll_samples: 0,
        };
    }
    let kind = classify_polling(session);
    session.kind = Some(kind);
    let mut labeling = Labeling {
        kind,
        alpha_c2s: None,
        alpha_s2c: None,
        invalid_poll_samples: 0,
    };

    if kind == PollingKind::OneShot {
        for s in session.samples.iter_mut() {
            s.tier = Some(if n > 1 && s.has_owd() { Tier::Tier1 } else { Tier::Tier0 });
            s.smoothed_c2s = None;
            s.smoothed_s2c = None;
        }
        return labeling;
    }

    let accepted: Vec<bool> = match kind {
        PollingKind::NonConstant => {
            let mut acc = vec![false; n];
            for run in segment_runs(&session.samples) {
                match apply_run_rule(&run) {
                    Ok(RunVerdict::Accept) => {
                        for i in run.indices() {
                            acc[i] = positive(&session.samples[i]);
                        }
                    }
                    Ok(_) => {}
                    Err(_) => labeling.invalid_poll_samples += run.len,
                }
            }
            acc
        }
        _ => {
            if session.samples.iter().any(|s| s.gt_rtt.is_some()) {
                apply_gtrtt_filter(&session.samples)
            } else {
                apply_mean_sigma_filter(&session.samples, cfg.sigma_k).unwrap_or_else(|_| vec![false; n])
            }
        }
    };

    for s in session.samples.iter_mut() {
        s.smoothed_c2s = None;
        s.smoothed_s2c = None;
    }
    let idx_c: Vec<usize> = (0..n).filter(|&i| accepted[i] && session.samples[i].c2s.is_some()).collect();
    let idx_s: Vec<usize> = (0..n).filter(|&i| accepted[i] && session.samples[i].s2c.is_some()).collect();
    if !idx_c.is_empty() {
        let xs: Vec<f64> = idx_c.iter().map(|&i| session.samples[i].c2s.unwrap()).collect();
        let e = smooth_ewma(&xs, &cfg.ewma_alpha_grid);
        for (k, &i) in idx_c.iter().enumerate() {
            session.samples[i].smoothed_c2s = Some(e.smoothed[k]);
        }
        labeling.alpha_c2s = Some(e.alpha);
    }
    if !idx_s.is_empty() {
        let xs: Vec<f64> = idx_s.iter().map(|&i| session.samples[i].s2c.unwrap()).collect();
        let e = smooth_ewma(&xs, &cfg.ewma_alpha_grid);
        for (k, &i) in idx_s.iter().enumerate() {
            session.samples[i].smoothed_s2c = Some(e.smoothed[k]);
        }
        labeling.alpha_s2c = Some(e.alpha);
    }

    let boundary = cfg.tier_boundary_ms / 1000.0;
    for (s, acc) in session.samples.iter_mut().zip(&accepted) {
        s.tier = Some(if !s.has_owd() {
            Tier::Tier0
        } else if *acc {
            Tier::Tier3
        } else {
            let worst = s.c2s.into_iter().chain(s.s2c).map(f64::abs).fold(0.0, f64::max);
            if worst < boundary {
                Tier::Tier2
            } else {
                Tier::Tier1
            }
        });
    }
    labeling
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TierCounts(pub [u64; 4]);

impl TierCounts {
    pub fn add(&mut self, t: Tier) {
        self.0[t.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn of(samples: &[OwdSample]) -> Self {
        let mut c = TierCounts::default();
        for t in samples.iter().filter_map(|s| s.tier) {
            c.add(t);
        }
        c
    }

    pub fn merge(&mut self, other: &TierCounts) {
        for i in 0..4 {
            self.0[i] += other.0[i];
        }
    }
}

/// Directional minimum OWDs in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinOwd {
    pub c2s_ms: Option<f64>,
    pub s2c_ms: Option<f64>,
}

impl MinOwd {
    pub fn smallest_ms(&self) -> Option<f64> {
        self.c2s_ms.into_iter().chain(self.s2c_ms).reduce(f64::min)
    }
}

/// Minimum raw OWD per direction over samples at or above `floor`.
pub fn min_owd(session: &ClientSession, floor: Tier) -> Result<MinOwd, TierError> {
    let q = || session.samples.iter().filter(|s| s.tier.is_some_and(|t| t >= floor));
    let c2s = q().filter_map(|s| s.c2s).reduce(f64::min).map(|v| v * 1000.0);
    let s2c = q().filter_map(|s| s.s2c).reduce(f64::min).map(|v| v * 1000.0);
    if c2s.is_none() && s2c.is_none() {
        return Err(TierError::NoQualifyingSamples {
            client: session.client,
            server: session.server,
            floor,
        });
    }
    Ok(MinOwd { c2s_ms: c2s, s2c_ms: s2c })
}

/// [`min_owd`] over every session; pairs without qualifying samples are left out.
pub fn min_owds(sessions: &[ClientSession], floor: Tier) -> BTreeMap<(IpAddr, IpAddr), MinOwd> {
    sessions
        .iter()
        .filter_map(|s| min_owd(s, floor).ok().map(|m| (s.key(), m)))
        .collect()
}
