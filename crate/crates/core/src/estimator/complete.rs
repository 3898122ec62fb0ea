//! Completion of the client-client block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::matrix::LatencyMatrix;
use super::EstimatorError;
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub rank: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Relative singular value cutoff for the pseudo-inverse.
    pub pinv_cutoff: f64,
    /// Complete element-wise squared latencies and take the root afterwards.
    pub squared: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            tol: 1e-9,
            max_iter: 10_000,
            pinv_cutoff: 1e-10,
            squared: false,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |s: &str| Err(EstimatorError::InvalidInput(s.to_string()));
        if self.rank == 0 {
            return bad("rank must be >= 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be >= 1");
        }
        if !(self.pinv_cutoff >= 0.0 && self.pinv_cutoff < 1.0) {
            return bad("pinv_cutoff must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub values: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub trait CompletionMethod: Send + Sync {
    /// Whether the method can run on `x` as masked.
    fn check(&self, x: &LatencyMatrix) -> Result<(), EstimatorError>;
    fn complete(&self, x: &LatencyMatrix, cfg: &CompletionConfig) -> Result<Completion, EstimatorError>;
}

pub fn completion_methods() -> Registry<dyn CompletionMethod> {
    let mut r: Registry<dyn CompletionMethod> = Registry::new("completion method");
    r.register("ihtsvd", Box::new(IhtSvd));
    r.register("closed-form", Box::new(ClosedForm));
    r
}

/// Run `method`, optionally on squared values.
pub fn complete_with(
    method: &dyn CompletionMethod,
    x: &LatencyMatrix,
    cfg: &CompletionConfig,
) -> Result<Completion, EstimatorError> {
    cfg.validate()?;
    if !cfg.squared {
        return method.complete(x, cfg);
    }
    let mut sq = x.clone();
    sq.values.apply(|v| *v *= *v);
    let mut out = method.complete(&sq, cfg)?;
    for i in 0..x.size() {
        for j in 0..x.size() {
            out.values[(i, j)] = match x.get(i, j) {
                Some(v) => v,
                None => out.values[(i, j)].max(0.0).sqrt(),
            };
        }
    }
    Ok(out)
}

/// Best rank-`k` approximation by truncated SVD.
pub fn truncate_rank(z: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = z.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for &i in order.iter().take(k) {
        out += svd.singular_values[i] * u.column(i) * vt.row(i);
    }
    out
}

/// Moore-Penrose pseudo-inverse, dropping singular values below
/// `cutoff * sigma_max`. Also returns the effective rank.
pub fn pinv(a: &DMatrix<f64>, cutoff: f64) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let smax = svd.singular_values.max();
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff * smax && s > 0.0 {
            rank += 1;
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    (out, rank)
}

/// Iterative hard-threshold SVD: truncate to rank k, restore observed
/// entries, repeat until the estimate stops moving.
pub struct IhtSvd;

impl CompletionMethod for IhtSvd {
    fn check(&self, x: &LatencyMatrix) -> Result<(), EstimatorError> {
        x.check_mask()
    }

    fn complete(&self, x: &LatencyMatrix, cfg: &CompletionConfig) -> Result<Completion, EstimatorError> {
        cfg.validate()?;
        self.check(x)?;
        let s = x.size();
        let observed: Vec<(usize, usize, f64)> = (0..s)
            .flat_map(|i| (0..s).map(move |j| (i, j)))
            .filter_map(|(i, j)| x.get(i, j).map(|v| (i, j, v)))
            .collect();
        let off: Vec<f64> = observed.iter().filter(|o| o.0 != o.1).map(|o| o.2).collect();
        let mean = off.iter().sum::<f64>() / off.len() as f64;

        let mut z = DMatrix::from_fn(s, s, |i, j| if x.mask[(i, j)] { x.values[(i, j)] } else { mean });
        let restore = |t: &mut DMatrix<f64>| {
            for &(i, j, v) in &observed {
                t[(i, j)] = v;
            }
        };
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_iter {
            iterations += 1;
            let mut next = truncate_rank(&z, cfg.rank);
            restore(&mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(EstimatorError::NonFinite);
            }
            let change = (&next - &z).norm() / z.norm().max(f64::MIN_POSITIVE);
            z = next;
            if change < cfg.tol {
                converged = true;
                break;
            }
        }
        let mut warnings = Vec::new();
        if !converged {
            warnings.push(format!("ihtsvd stopped at max_iter {} before reaching tol", cfg.max_iter));
        }
        Ok(Completion {
            values: z,
            iterations,
            converged,
            warnings,
        })
    }
}

/// Closed-form completion from the server block.
///
/// With every B and D entry observed this is `C = D A† B`. Missing B and D
/// entries are handled per client: the observed part of a column of B is
/// fitted as `A_S w` by least squares, which fills the column as `A w`;
/// rows of D likewise. `C` is then `V A W`, equal to `D A† B` when nothing
/// was missing.
pub struct ClosedForm;

impl ClosedForm {
    fn server_block(x: &LatencyMatrix) -> Result<DMatrix<f64>, EstimatorError> {
        let m = x.m;
        let mut a = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = x.get(i, j).ok_or_else(|| {
                    EstimatorError::IncompleteBlock(format!("A entry ({}, {})", x.ids[i], x.ids[j]))
                })?;
            }
        }
        Ok(a)
    }

    fn observed_servers(x: &LatencyMatrix, client: usize, column: bool) -> Vec<usize> {
        (0..x.m)
            .filter(|&i| if column { x.mask[(i, client)] } else { x.mask[(client, i)] })
            .collect()
    }
}

/// Closed-form client block from fully observed server-side blocks.
pub fn closed_form_c(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    cutoff: f64,
) -> (DMatrix<f64>, usize) {
    let (ap, rank) = pinv(a, cutoff);
    (d * ap * b, rank)
}

impl CompletionMethod for ClosedForm {
    fn check(&self, x: &LatencyMatrix) -> Result<(), EstimatorError> {
        Self::server_block(x)?;
        for c in x.m..x.size() {
            for column in [true, false] {
                if Self::observed_servers(x, c, column).is_empty() {
                    let dir = if column { "server-to-client" } else { "client-to-server" };
                    return Err(EstimatorError::IncompleteBlock(format!("{} has no {dir} entry", x.ids[c])));
                }
            }
        }
        Ok(())
    }

    fn complete(&self, x: &LatencyMatrix, cfg: &CompletionConfig) -> Result<Completion, EstimatorError> {
        cfg.validate()?;
        self.check(x)?;
        let (m, n) = (x.m, x.n);
        let a = Self::server_block(x)?;
        let (_, rank) = pinv(&a, cfg.pinv_cutoff);

        // Column j of W maps A onto client j's B column; row j of V maps A
        // onto its D row.
        let mut w = DMatrix::zeros(m, n);
        let mut v = DMatrix::zeros(n, m);
        for j in 0..n {
            let c = m + j;
            let rows = Self::observed_servers(x, c, true);
            let a_s = a.select_rows(&rows);
            let b_s = DMatrix::from_fn(rows.len(), 1, |k, _| x.values[(rows[k], c)]);
            w.set_column(j, &(pinv(&a_s, cfg.pinv_cutoff).0 * b_s).column(0));

            let cols = Self::observed_servers(x, c, false);
            let a_s = a.select_columns(&cols);
            let d_s = DMatrix::from_fn(1, cols.len(), |_, k| x.values[(c, cols[k])]);
            v.set_row(j, &(d_s * pinv(&a_s, cfg.pinv_cutoff).0).row(0));
        }
        let b = &a * &w;
        let d = &v * &a;
        let c = &d * &w;

        let mut warnings = Vec::new();
        if rank < 4 {
            let msg = format!("A has effective rank {rank} < 4; closed form may be inaccurate");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut values = x.values.clone();
        for i in 0..x.size() {
            for j in 0..x.size() {
                if x.mask[(i, j)] {
                    continue;
                }
                values[(i, j)] = match (i < m, j < m) {
                    (true, false) => b[(i, j - m)],
                    (false, true) => d[(i - m, j)],
                    (false, false) => c[(i - m, j - m)],
                    (true, true) => unreachable!("A is fully observed"),
                };
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite);
        }
        Ok(Completion {
            values,
            iterations: 1,
            converged: true,
            warnings,
        })
    }
}
