//! Estimating equations `G_n(θ) = 0`: evaluation, damped Newton with
//! multi-start, and sandwich variance estimates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::EstimatingFunction;
use crate::model::{ParamBox, ParameterVector};
use crate::parallel;
use crate::simulate::ObservationPath;
use crate::stats;

/// Observations per partial sum. Fixed so that sums do not depend on the
/// number of workers.
pub const SUM_CHUNK: usize = 4096;

/// `G_n(θ)`, its Jacobian and the raw outer-product sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GnEvaluation {
    pub value: DVector<f64>,
    /// `(1/(nΔ)) Σ ∂θ g`.
    pub jacobian: DMatrix<f64>,
    /// `Σ g gᵀ`, unnormalized.
    pub outer_sum: DMatrix<f64>,
    pub n: usize,
    pub delta: f64,
}

impl GnEvaluation {
    /// `nΔ`.
    pub fn scale(&self) -> f64 {
        self.n as f64 * self.delta
    }

    /// `Σ ∂θ g`, unnormalized.
    pub fn jacobian_sum(&self) -> DMatrix<f64> {
        &self.jacobian * self.scale()
    }
}

/// Evaluates `G_n(θ) = (1/(nΔ)) Σ g(Δ, X_i, X_{i−1}, θ)` with its Jacobian.
pub fn eval_gn(ef: &dyn EstimatingFunction, path: &ObservationPath, theta: &[f64]) -> Result<GnEvaluation> {
    let d = ef.dim();
    if theta.len() != d {
        return Err(Error::DimensionMismatch(format!("θ has length {}, estimating function has dimension {d}", theta.len())));
    }
    let n = path.n();
    if n < 1 {
        return Err(Error::Invalid("a path needs at least two observations".into()));
    }
    let delta = path.delta();
    let width = d + d * d + d * d;
    let chunks = n.div_ceil(SUM_CHUNK);
    let parts: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            let mut g = vec![0.0; d];
            let mut jac = vec![0.0; d * d];
            for i in (c * SUM_CHUNK + 1)..=((c + 1) * SUM_CHUNK).min(n) {
                let (x, y) = (path.values[i - 1], path.values[i]);
                ef.value_and_dtheta(delta, y, x, theta, &mut g, &mut jac)?;
                if g.iter().chain(&jac).any(|v| !v.is_finite()) {
                    return Err(Error::NanEstimatingFunction { index: i });
                }
                let (gs, rest) = acc.split_at_mut(d);
                let (js, os) = rest.split_at_mut(d * d);
                for a in 0..d {
                    gs[a] += g[a];
                    for b in 0..d {
                        js[a * d + b] += jac[a * d + b];
                        os[a * d + b] += g[a] * g[b];
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let sums = parallel::tree_reduce(parts.into_iter().collect::<Result<Vec<_>>>()?);
    let scale = n as f64 * delta;
    Ok(GnEvaluation {
        value: DVector::from_iterator(d, sums[..d].iter().map(|v| v / scale)),
        jacobian: DMatrix::from_row_slice(d, d, &sums[d..d + d * d]) / scale,
        outer_sum: DMatrix::from_row_slice(d, d, &sums[d + d * d..]),
        n,
        delta,
    })
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Number of low-discrepancy starts when no explicit list is given.
    pub starts: usize,
    /// Fraction by which the search box is shrunk to form the compact set K.
    pub k_shrink: f64,
    /// Condition number above which the Jacobian counts as singular.
    pub max_condition: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50, starts: 8, k_shrink: 0.05, max_condition: 1e12 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("solver tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 || self.starts == 0 {
            return Err(Error::Config("solver max_iter and starts must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.k_shrink) {
            return Err(Error::Config(format!("k_shrink must lie in [0, 0.5), got {}", self.k_shrink)));
        }
        if !(self.max_condition > 1.0) {
            return Err(Error::Config("max_condition must exceed 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a single Newton run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonOutcome {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Damped Newton iteration `θ ← θ − s J⁻¹ G` inside the open box. The step
/// is halved until the iterate stays in the box and `‖G‖₂` decreases.
pub fn newton_solve(
    ef: &dyn EstimatingFunction,
    path: &ObservationPath,
    start: &[f64],
    pbox: &ParamBox,
    cfg: &SolverConfig,
) -> Result<NewtonOutcome> {
    pbox.check(start)?;
    let mut theta = DVector::from_column_slice(start);
    let mut ev = eval_gn(ef, path, start)?;
    let mut iterations = 0;
    while sup_norm(&ev.value) > cfg.tol && iterations < cfg.max_iter {
        let cond = condition_number(&ev.jacobian);
        if cond > cfg.max_condition {
            return Err(Error::SingularJacobian { condition: cond, iterate: theta.as_slice().to_vec() });
        }
        let step = ev
            .jacobian
            .clone()
            .lu()
            .solve(&ev.value)
            .ok_or_else(|| Error::SingularJacobian { condition: cond, iterate: theta.as_slice().to_vec() })?;
        let norm = ev.value.norm();
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &theta - &step * s;
            s *= 0.5;
            if !pbox.contains(trial.as_slice()) {
                continue;
            }
            match eval_gn(ef, path, trial.as_slice()) {
                Ok(e) if e.value.norm() < norm => {
                    accepted = Some((trial, e));
                    break;
                }
                _ => continue,
            }
        }
        iterations += 1;
        match accepted {
            Some((t, e)) => {
                theta = t;
                ev = e;
            }
            None => break,
        }
    }
    let residual_norm = sup_norm(&ev.value);
    Ok(NewtonOutcome { theta: theta.as_slice().to_vec(), converged: residual_norm <= cfg.tol, residual_norm, iterations })
}

/// Where the Newton runs start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Starts {
    Count(usize),
    List(Vec<Vec<f64>>),
}

/// Sandwich estimate `V̂ = nΔ S⁻¹ (Σ g gᵀ) S⁻ᵀ` with `S = Σ ∂θ g`, plus its
/// PSD square root.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub vhat: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
}

/// Block estimate for the `(α, β)` layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockVariance {
    /// α-block sandwich scaled by `nΔ`.
    pub v1: Vec<Vec<f64>>,
    /// `n (Σ ∂β g_β)⁻² Σ g_β²`.
    pub v2: f64,
    /// `V̂1^{1/2}`.
    pub v1_sqrt: Vec<Vec<f64>>,
}

/// Unique PSD square root by symmetric eigendecomposition. Eigenvalues below
/// `−1e-10` relative to the largest magnitude are an error, smaller negatives
/// are clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite(min));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

fn sandwich(jsum: &DMatrix<f64>, outer: &DMatrix<f64>, scale: f64, at: &[f64], max_cond: f64) -> Result<DMatrix<f64>> {
    let cond = condition_number(jsum);
    if cond > max_cond {
        return Err(Error::SingularJacobian { condition: cond, iterate: at.to_vec() });
    }
    let inv = jsum
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian { condition: cond, iterate: at.to_vec() })?;
    let v = &inv * outer * inv.transpose() * scale;
    Ok((&v + v.transpose()) * 0.5)
}

pub fn estimate_variance(ef: &dyn EstimatingFunction, path: &ObservationPath, theta: &[f64]) -> Result<VarianceEstimate> {
    let ev = eval_gn(ef, path, theta)?;
    variance_from(&ev, theta, SolverConfig::default().max_condition)
}

fn variance_from(ev: &GnEvaluation, theta: &[f64], max_cond: f64) -> Result<VarianceEstimate> {
    let vhat = sandwich(&ev.jacobian_sum(), &ev.outer_sum, ev.scale(), theta, max_cond)?;
    let sqrt = psd_sqrt(&vhat)?;
    Ok(VarianceEstimate { vhat, sqrt })
}

pub fn estimate_block_variance(ef: &dyn EstimatingFunction, path: &ObservationPath, theta: &[f64]) -> Result<BlockVariance> {
    let ev = eval_gn(ef, path, theta)?;
    block_from(ef, &ev, theta, SolverConfig::default().max_condition)
}

fn block_from(ef: &dyn EstimatingFunction, ev: &GnEvaluation, theta: &[f64], max_cond: f64) -> Result<BlockVariance> {
    let split = ef.coord_split().ok_or(Error::MissingCoordSplit)?;
    let a = &split.alpha;
    let b = split.beta;
    let jsum = ev.jacobian_sum();
    let ja = DMatrix::from_fn(a.len(), a.len(), |i, j| jsum[(a[i], a[j])]);
    let oa = DMatrix::from_fn(a.len(), a.len(), |i, j| ev.outer_sum[(a[i], a[j])]);
    let v1 = sandwich(&ja, &oa, ev.scale(), theta, max_cond)?;
    let v1_sqrt = psd_sqrt(&v1)?;
    let denom = jsum[(b, b)];
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::ZeroDenominator(format!("Σ ∂β g_β = {denom}")));
    }
    let v2 = ev.n as f64 * ev.outer_sum[(b, b)] / (denom * denom);
    Ok(BlockVariance { v1: rows(&v1), v2, v1_sqrt: rows(&v1_sqrt) })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Final estimate with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationResult {
    pub theta_hat: ParameterVector,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Full sandwich `V̂_n`.
    pub vhat: Option<Vec<Vec<f64>>>,
    pub vhat_sqrt: Option<Vec<Vec<f64>>>,
    pub vhat_block: Option<BlockVariance>,
    /// Standard errors of θ̂: block form with `δn = diag(√(nΔ), …, √n)` when
    /// the estimating function declares a coordinate split, else `√(V̂_jj/(nΔ))`.
    pub std_errors: Option<Vec<f64>>,
    pub start_points_tried: usize,
    pub converged_starts: usize,
    pub distinct_roots: usize,
    /// Why no variance could be formed, if so.
    pub variance_error: Option<String>,
}

/// Start points for a multi-start run: the given list, or Halton points in
/// the compact set K.
pub fn start_points(starts: &Starts, k: &ParamBox) -> Vec<Vec<f64>> {
    match starts {
        Starts::List(v) => v.clone(),
        Starts::Count(c) => (0..*c)
            .map(|i| {
                stats::halton(i + 1, k.dim())
                    .iter()
                    .enumerate()
                    .map(|(j, u)| k.lower[j] + u * (k.upper[j] - k.lower[j]))
                    .collect()
            })
            .collect(),
    }
}

/// Runs Newton from every start and picks the converged root inside K with
/// the smallest residual; residual ties (within 1e-12) go to the root nearest
/// the barycenter of all converged roots. `search_box` defaults to Θ.
pub fn multi_start_solve(
    ef: &dyn EstimatingFunction,
    path: &ObservationPath,
    starts: &Starts,
    theta_box: &ParamBox,
    search_box: Option<&ParamBox>,
    cfg: &SolverConfig,
) -> Result<EstimationResult> {
    cfg.validate()?;
    let k = search_box.unwrap_or(theta_box).shrink(cfg.k_shrink);
    let points = start_points(starts, &k);
    if points.is_empty() {
        return Err(Error::Invalid("at least one start point is required".into()));
    }
    let mut roots: Vec<NewtonOutcome> = Vec::new();
    for p in &points {
        match newton_solve(ef, path, p, theta_box, cfg) {
            Ok(o) if o.converged && k.contains_closed(&o.theta) => roots.push(o),
            Ok(_) | Err(Error::SingularJacobian { .. }) => {}
            Err(e @ Error::DimensionMismatch(_)) | Err(e @ Error::ParameterOutsideBox(_)) => return Err(e),
            Err(_) => {}
        }
    }
    if roots.is_empty() {
        return Err(Error::NoRootFound { starts: points.len() });
    }
    let d = ef.dim();
    let bary: Vec<f64> = (0..d).map(|j| roots.iter().map(|r| r.theta[j]).sum::<f64>() / roots.len() as f64).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let best_res = roots.iter().map(|r| r.residual_norm).fold(f64::INFINITY, f64::min);
    let best = roots
        .iter()
        .filter(|r| r.residual_norm <= best_res + 1e-12)
        .min_by(|a, b| dist(&a.theta, &bary).total_cmp(&dist(&b.theta, &bary)))
        .expect("at least one root")
        .clone();
    let mut distinct: Vec<&[f64]> = Vec::new();
    for r in &roots {
        if distinct.iter().all(|q| dist(q, &r.theta) > 1e-6) {
            distinct.push(&r.theta);
        }
    }

    let ev = eval_gn(ef, path, &best.theta)?;
    let mut variance_error = None;
    let full = match variance_from(&ev, &best.theta, cfg.max_condition) {
        Ok(v) => Some(v),
        Err(e) => {
            variance_error = Some(e.to_string());
            None
        }
    };
    let block = match ef.coord_split() {
        Some(_) => match block_from(ef, &ev, &best.theta, cfg.max_condition) {
            Ok(b) => Some(b),
            Err(e) => {
                variance_error.get_or_insert(e.to_string());
                None
            }
        },
        None => None,
    };
    let nd = ev.scale();
    let std_errors = match (&block, &full, ef.coord_split()) {
        (Some(b), _, Some(split)) => {
            let mut se = vec![f64::NAN; d];
            for (i, &a) in split.alpha.iter().enumerate() {
                se[a] = (b.v1[i][i] / nd).sqrt();
            }
            se[split.beta] = (b.v2 / ev.n as f64).sqrt();
            Some(se)
        }
        (None, Some(v), None) => Some((0..d).map(|j| (v.vhat[(j, j)] / nd).sqrt()).collect()),
        _ => None,
    };
    Ok(EstimationResult {
        theta_hat: ParameterVector::from_slice(&best.theta, theta_box.d1)?,
        converged: best.converged,
        residual_norm: best.residual_norm,
        iterations: best.iterations,
        vhat: full.as_ref().map(|v| rows(&v.vhat)),
        vhat_sqrt: full.as_ref().map(|v| rows(&v.sqrt)),
        vhat_block: block,
        std_errors,
        start_points_tried: points.len(),
        converged_starts: roots.len(),
        distinct_roots: distinct.len(),
        variance_error,
    })
}
