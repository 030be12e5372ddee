//! Population quantities: ergodic averages, the limits A, B, C and the
//! block objects B1, B2, D1, D2, Fisher information, and numerical checks of
//! the identifiability and efficiency conditions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::{generator_of_ef, CoordSplit, EstimatingFunction};
use crate::generator::apply_generator_with;
use crate::model::{Dominating, JumpDiffusionModel, JumpSupport};
use crate::quadrature;
use crate::rng;
use crate::simulate::{simulate_path_from, SamplingScheme, StartPoint};

type Matrix = Vec<Vec<f64>>;

/// Long-run simulation used for every π-integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErgodicConfig {
    /// Time horizon T of the averaging path.
    pub horizon: f64,
    pub delta: f64,
    pub substeps: usize,
    /// Warm-up time before the first averaged state.
    pub burn_in: f64,
    pub batches: usize,
    pub seed: u64,
    pub x0: f64,
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self { horizon: 2000.0, delta: 0.05, substeps: 32, burn_in: 50.0, batches: 20, seed: 20_240_601, x0: 0.0 }
    }
}

impl ErgodicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.horizon >= 2.0 * self.delta && self.horizon.is_finite()) {
            return Err(Error::Config("ergodic horizon must cover at least two steps of positive length".into()));
        }
        if self.substeps == 0 || self.batches < 2 {
            return Err(Error::Config("ergodic substeps must be positive and batches at least 2".into()));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(Error::Config("burn_in must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.delta).round() as usize
    }
}

/// States `X_0, …, X_{n−1}` of one long path, approximately π-distributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicSample {
    pub states: Vec<f64>,
    pub batches: usize,
    /// Relative numerical floor added to every standard error: summation
    /// rounding `nε` plus the quadrature tolerance.
    pub floor_rel: f64,
}

pub fn ergodic_sample(model: &JumpDiffusionModel, theta: &[f64], cfg: &ErgodicConfig) -> Result<ErgodicSample> {
    cfg.validate()?;
    let n = cfg.steps();
    if n < cfg.batches {
        return Err(Error::Config(format!("{n} ergodic steps cannot fill {} batches", cfg.batches)));
    }
    let scheme = SamplingScheme::with_cap(n, cfg.delta, f64::INFINITY)?;
    let start = StartPoint::Stationary { x0: cfg.x0, burn_in: cfg.burn_in };
    let mut path = simulate_path_from(model, theta, scheme, start, cfg.substeps, cfg.seed)?;
    path.values.pop();
    Ok(ErgodicSample {
        states: path.values,
        batches: cfg.batches,
        floor_rel: n as f64 * f64::EPSILON + model.quadrature.tol,
    })
}

/// Time average with batch-means standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub points: usize,
    #[serde(skip)]
    pub batch_means: Vec<Vec<f64>>,
    #[serde(skip)]
    pub floor_rel: f64,
}

fn floor_se(se_batch: f64, value: f64, floor_rel: f64) -> f64 {
    se_batch.hypot(floor_rel * value.abs())
}

impl ErgodicEstimate {
    /// A smooth function of the averages with a batch-based standard error.
    pub fn functional(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<(Vec<f64>, Vec<f64>)> {
        let value = f(&self.mean)?;
        let per = self.batch_means.iter().map(|b| f(b)).collect::<Result<Vec<_>>>()?;
        let nb = per.len() as f64;
        // Propagated rounding can exceed the input floor; 10x is a loose bound.
        let se = (0..value.len())
            .map(|k| {
                let m = per.iter().map(|p| p[k]).sum::<f64>() / nb;
                let var = per.iter().map(|p| (p[k] - m).powi(2)).sum::<f64>() / (nb - 1.0);
                floor_se((var / nb).sqrt(), value[k], 10.0 * self.floor_rel)
            })
            .collect();
        Ok((value, se))
    }
}

/// Averages `f` over the sample.
pub fn average_over(sample: &ErgodicSample, f: &(dyn Fn(f64) -> Result<Vec<f64>> + Sync)) -> Result<ErgodicEstimate> {
    let values = sample.states.par_iter().map(|&x| f(x)).collect::<Vec<Result<Vec<f64>>>>();
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let dim = values.first().map_or(0, |v| v.len());
    if values.iter().any(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch("integrand changed length between states".into()));
    }
    let n = values.len();
    let nb = sample.batches;
    let mut total = vec![0.0; dim];
    let mut batch_means = Vec::with_capacity(nb);
    for b in 0..nb {
        let (lo, hi) = (b * n / nb, (b + 1) * n / nb);
        let mut s = vec![0.0; dim];
        for v in &values[lo..hi] {
            for k in 0..dim {
                s[k] += v[k];
            }
        }
        for k in 0..dim {
            total[k] += s[k];
        }
        batch_means.push(s.iter().map(|v| v / (hi - lo) as f64).collect::<Vec<f64>>());
    }
    let mean: Vec<f64> = total.iter().map(|v| v / n as f64).collect();
    let se = (0..dim)
        .map(|k| {
            let m = batch_means.iter().map(|b| b[k]).sum::<f64>() / nb as f64;
            let var = batch_means.iter().map(|b| (b[k] - m).powi(2)).sum::<f64>() / (nb as f64 - 1.0);
            floor_se((var / nb as f64).sqrt(), mean[k], sample.floor_rel)
        })
        .collect();
    Ok(ErgodicEstimate { mean, se, points: n, batch_means, floor_rel: sample.floor_rel })
}

/// `(1/n) Σ f(X_{i−1})` along one long path at θ.
pub fn ergodic_average(
    f: &(dyn Fn(f64) -> Result<Vec<f64>> + Sync),
    model: &JumpDiffusionModel,
    theta: &[f64],
    cfg: &ErgodicConfig,
) -> Result<ErgodicEstimate> {
    model.param_box.check(theta)?;
    average_over(&ergodic_sample(model, theta, cfg)?, f)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn square(v: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, v)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    if sv.min() == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / sv.min()
    }
}

/// `g`, `∂y g`, `∂²y g` at `t = 0`.
fn local(ef: &dyn EstimatingFunction, y: f64, x: f64, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = ef.dim();
    let (mut g, mut gy, mut gyy) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    ef.value(0.0, y, x, theta, &mut g)?;
    ef.dy(0.0, y, x, theta, &mut gy)?;
    ef.dy2(0.0, y, x, theta, &mut gyy)?;
    Ok((g, gy, gyy))
}

fn fd_step(v: f64) -> f64 {
    f64::EPSILON.cbrt() * v.abs().max(1.0)
}

fn a_integrand(ef: &dyn EstimatingFunction, model: &JumpDiffusionModel, x: f64, theta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let under_true = generator_of_ef(ef, model, x, x, theta, lambda)?;
    let under_theta = generator_of_ef(ef, model, x, x, theta, theta)?;
    Ok(under_true.iter().zip(&under_theta).map(|(a, b)| a - b).collect())
}

/// `∂θ` of the A-integrand by central differences, row-major `d×d`.
fn b_generator_integrand(ef: &dyn EstimatingFunction, model: &JumpDiffusionModel, x: f64, theta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let d = ef.dim();
    let mut out = vec![0.0; d * d];
    let mut th = theta.to_vec();
    for k in 0..d {
        let h = fd_step(theta[k]);
        th[k] = theta[k] + h;
        let up = a_integrand(ef, model, x, &th, lambda)?;
        th[k] = theta[k] - h;
        let dn = a_integrand(ef, model, x, &th, lambda)?;
        th[k] = theta[k];
        for j in 0..d {
            out[j * d + k] = (up[j] - dn[j]) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Jump-score form of B at θ = λ, written over the mark space:
/// `−[∂y g ∂θ a + ½ ∂²y g ∂θ b² + ∫ (∂y g(x+c) ∂θ c + g(x+c) ∂θ q / q) ν(dz)]`.
fn b_score_integrand(ef: &dyn EstimatingFunction, model: &JumpDiffusionModel, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
    let d = ef.dim();
    let (_, gy, gyy) = local(ef, x, x, theta)?;
    let da = model.coeffs.drift_dtheta(x, theta);
    let db2 = model.coeffs.diffusion_sq_dtheta(x, theta);
    let mut out = vec![0.0; d * d];
    for j in 0..d {
        for k in 0..d {
            out[j * d + k] = -(gy[j] * da[k] + 0.5 * gyy[j] * db2[k]);
        }
    }
    let nodes = model.levy_nodes(theta)?;
    let (mut g, mut gyj) = (vec![0.0; d], vec![0.0; d]);
    for (&z, &w) in nodes.z.iter().zip(&nodes.w) {
        let c = model.jump(x, z, theta);
        let dc = model.coeffs.jump_dtheta(x, z, theta);
        let q = model.levy.intensity(z, theta);
        let dq = model.levy.intensity_dtheta(z, theta);
        ef.value(0.0, x + c, x, theta, &mut g)?;
        ef.dy(0.0, x + c, x, theta, &mut gyj)?;
        for j in 0..d {
            for k in 0..d {
                let score = if q > 0.0 { dq[k] / q } else { 0.0 };
                out[j * d + k] -= w * (gyj[j] * dc[k] + g[j] * score);
            }
        }
    }
    Ok(out)
}

/// `ℒ_λ (g gᵀ)(0, ·, x, θ)(x)`, row-major `d×d`.
fn c_integrand(ef: &dyn EstimatingFunction, model: &JumpDiffusionModel, x: f64, theta: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let d = ef.dim();
    let (g, gy, gyy) = local(ef, x, x, theta)?;
    let mut f = vec![0.0; d * d];
    let mut fy = vec![0.0; d * d];
    let mut fyy = vec![0.0; d * d];
    for j in 0..d {
        for k in 0..d {
            f[j * d + k] = g[j] * g[k];
            fy[j * d + k] = gy[j] * g[k] + g[j] * gy[k];
            fyy[j * d + k] = gyy[j] * g[k] + 2.0 * gy[j] * gy[k] + g[j] * gyy[k];
        }
    }
    let mut out = vec![0.0; d * d];
    let mut failure = None;
    let mut buf = vec![0.0; d];
    apply_generator_with(
        model,
        lambda,
        x,
        &f,
        &fy,
        &fyy,
        &mut |yy, o| {
            if let Err(e) = ef.value(0.0, yy, x, theta, &mut buf) {
                failure.get_or_insert(e);
            }
            for j in 0..d {
                for k in 0..d {
                    o[j * d + k] = buf[j] * buf[k];
                }
            }
        },
        &mut out,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BRoute {
    /// Jump-score expansion at θ = λ.
    JumpScore,
    /// Finite differences in θ of the generator form.
    Generator,
}

/// `A(θ, λ)`, `B(θ, λ)`, `C(θ, λ)` with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationAbc {
    pub a: Vec<f64>,
    pub a_se: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub b_se: Vec<Vec<f64>>,
    pub b_route: BRoute,
    pub b_generator: Vec<Vec<f64>>,
    pub b_generator_se: Vec<Vec<f64>>,
    pub b_score: Option<Vec<Vec<f64>>>,
    pub b_score_se: Option<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    pub c_se: Vec<Vec<f64>>,
    pub points: usize,
    #[serde(skip)]
    estimate: ErgodicEstimate,
    #[serde(skip)]
    dim: usize,
}

fn block(v: &[f64], offset: usize, d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|j| v[offset + j * d..offset + (j + 1) * d].to_vec()).collect()
}

impl PopulationAbc {
    fn b_offset(&self) -> usize {
        let d = self.dim;
        match self.b_route {
            BRoute::Generator => d,
            BRoute::JumpScore => d + 2 * d * d,
        }
    }

    /// `B⁻¹ C B⁻ᵀ` with batch-based standard errors.
    pub fn sandwich(&self) -> Result<(Matrix, Matrix)> {
        let d = self.dim;
        let bo = self.b_offset();
        let co = d + d * d;
        let (v, se) = self.estimate.functional(|m| {
            let b = square(&m[bo..bo + d * d], d);
            let c = square(&m[co..co + d * d], d);
            let inv = b.try_inverse().ok_or_else(|| Error::SingularJacobian { condition: f64::INFINITY, iterate: vec![] })?;
            let v = &inv * c * inv.transpose();
            Ok(v.iter().copied().collect::<Vec<f64>>())
        })?;
        // nalgebra iterates column-major; transpose back to rows.
        let vm = DMatrix::from_column_slice(d, d, &v);
        let sm = DMatrix::from_column_slice(d, d, &se);
        Ok((rows(&vm), rows(&sm)))
    }

    /// Largest `|B_gen − B_rem| / √(se_gen² + se_rem²)` over entries.
    pub fn route_discrepancy(&self) -> Option<f64> {
        let (rem, rem_se) = (self.b_score.as_ref()?, self.b_score_se.as_ref()?);
        let mut worst = 0.0f64;
        for j in 0..self.dim {
            for k in 0..self.dim {
                let diff = (self.b_generator[j][k] - rem[j][k]).abs();
                let se = self.b_generator_se[j][k].hypot(rem_se[j][k]);
                worst = worst.max(if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY });
            }
        }
        Some(worst)
    }
}

/// Computes A, B and C by ergodic averaging under λ. B comes from the
/// jump-score expansion when θ = λ and the model carries a transformed jump
/// density, otherwise from differencing the generator form; both routes are
/// reported when available.
pub fn population_abc(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta: &[f64],
    lambda: &[f64],
    cfg: &ErgodicConfig,
) -> Result<PopulationAbc> {
    model.param_box.check(theta)?;
    model.param_box.check(lambda)?;
    let sample = ergodic_sample(model, lambda, cfg)?;
    population_abc_on(ef, model, theta, lambda, &sample)
}

pub fn population_abc_on(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta: &[f64],
    lambda: &[f64],
    sample: &ErgodicSample,
) -> Result<PopulationAbc> {
    let d = ef.dim();
    if theta.len() != d || lambda.len() != d {
        return Err(Error::DimensionMismatch(format!("estimating function has dimension {d}, θ has {}", theta.len())));
    }
    let diagonal = theta == lambda;
    let f = |x: f64| -> Result<Vec<f64>> {
        let mut v = a_integrand(ef, model, x, theta, lambda)?;
        v.extend(b_generator_integrand(ef, model, x, theta, lambda)?);
        v.extend(c_integrand(ef, model, x, theta, lambda)?);
        if diagonal {
            v.extend(b_score_integrand(ef, model, x, theta)?);
        }
        Ok(v)
    };
    let est = average_over(sample, &f)?;
    let b_route = if diagonal && model.transform.is_some() { BRoute::JumpScore } else { BRoute::Generator };
    let (m, s) = (&est.mean, &est.se);
    let mut out = PopulationAbc {
        a: m[..d].to_vec(),
        a_se: s[..d].to_vec(),
        b: Vec::new(),
        b_se: Vec::new(),
        b_route,
        b_generator: block(m, d, d),
        b_generator_se: block(s, d, d),
        b_score: diagonal.then(|| block(m, d + 2 * d * d, d)),
        b_score_se: diagonal.then(|| block(s, d + 2 * d * d, d)),
        c: block(m, d + d * d, d),
        c_se: block(s, d + d * d, d),
        points: est.points,
        estimate: est.clone(),
        dim: d,
    };
    let bo = out.b_offset();
    out.b = block(m, bo, d);
    out.b_se = block(s, bo, d);
    Ok(out)
}

/// Identifiability and non-degeneracy diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumption31Report {
    /// Smallest `‖A(θ, λ)‖` over the grid and its standard error.
    pub min_a_norm: Option<f64>,
    pub min_a_norm_se: Option<f64>,
    pub min_a_theta: Option<Vec<f64>>,
    /// Smallest ratio `‖A‖ / SE` over the grid.
    pub min_a_ratio: Option<f64>,
    pub a_identifiable: bool,
    pub b_condition: f64,
    pub b_nonsingular: bool,
    pub c_min_eigenvalue: f64,
    pub c_min_eigenvalue_se: f64,
    pub c_positive_definite: bool,
    pub grid_size: usize,
    pub excluded: usize,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Reports `min ‖A(θ, λ)‖` over the grid, `cond B(λ, λ)` and the smallest
/// eigenvalue of the symmetrized `C(λ, λ)`. Grid points equal to λ are
/// dropped with a warning.
pub fn check_assumption_31(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta_grid: &[Vec<f64>],
    lambda: &[f64],
    cfg: &ErgodicConfig,
) -> Result<Assumption31Report> {
    let sample = ergodic_sample(model, lambda, cfg)?;
    let mut warnings = Vec::new();
    let mut excluded = 0;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut min_ratio: Option<f64> = None;
    for th in theta_grid {
        if th.len() == lambda.len() && th.iter().zip(lambda).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)) {
            excluded += 1;
            warnings.push(format!("grid point {th:?} equals the true parameter and was excluded"));
            continue;
        }
        model.param_box.check(th)?;
        let est = average_over(&sample, &|x| a_integrand(ef, model, x, th, lambda))?;
        let (norm, se) = est.functional(|m| Ok(vec![m.iter().map(|v| v * v).sum::<f64>().sqrt()]))?;
        let ratio = if se[0] > 0.0 { norm[0] / se[0] } else { f64::INFINITY };
        min_ratio = Some(min_ratio.map_or(ratio, |r: f64| r.min(ratio)));
        if best.as_ref().is_none_or(|b| norm[0] < b.0) {
            best = Some((norm[0], se[0], th.clone()));
        }
    }
    let abc = population_abc_on(ef, model, lambda, lambda, &sample)?;
    let d = ef.dim();
    let b = DMatrix::from_fn(d, d, |i, j| abc.b[i][j]);
    let b_condition = condition_number(&b);
    let co = d + d * d;
    let (eig, eig_se) = abc.estimate.functional(|m| {
        let c = square(&m[co..co + d * d], d);
        let sym = (&c + c.transpose()) * 0.5;
        Ok(vec![SymmetricEigen::new(sym).eigenvalues.min()])
    })?;
    let a_identifiable = min_ratio.is_some_and(|r| r > 3.0);
    let b_nonsingular = b_condition <= 1e12;
    let c_positive_definite = eig[0] > 3.0 * eig_se[0];
    Ok(Assumption31Report {
        min_a_norm: best.as_ref().map(|b| b.0),
        min_a_norm_se: best.as_ref().map(|b| b.1),
        min_a_theta: best.map(|b| b.2),
        min_a_ratio: min_ratio,
        a_identifiable,
        b_condition,
        b_nonsingular,
        c_min_eigenvalue: eig[0],
        c_min_eigenvalue_se: eig_se[0],
        c_positive_definite,
        grid_size: theta_grid.len(),
        excluded,
        warnings,
        pass: a_identifiable && b_nonsingular && c_positive_definite,
    })
}

/// Points of ℳ_k(x, α̃).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachableSetSample {
    pub x: f64,
    pub k: usize,
    pub points: Vec<f64>,
    pub alpha_used: Vec<f64>,
    /// True when the level was enumerated rather than sampled.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachConfig {
    pub samples_per_level: usize,
    pub seed: u64,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self { samples_per_level: 256, seed: 7 }
    }
}

const MAX_ENUMERATED_ATOMS: usize = 16;

/// Builds ℳ_0, …, ℳ_{k_max} from `x` by repeated jumps `y ↦ y + c(y, z, θ)`.
/// Counting measures with at most 16 atoms are enumerated exactly; otherwise
/// level `k` applies one fresh mark to each of `samples_per_level` points
/// drawn cyclically from level `k − 1`.
pub fn reachable_sets(
    model: &JumpDiffusionModel,
    x: f64,
    theta: &[f64],
    k_max: usize,
    cfg: &ReachConfig,
) -> Result<Vec<ReachableSetSample>> {
    if k_max > 4 {
        return Err(Error::Invalid(format!("k_max must be at most 4, got {k_max}")));
    }
    if !model.state_space.contains(x) {
        return Err(Error::DomainExit { state: x, context: "reachable-set origin".into() });
    }
    let support: Option<Vec<f64>> = match model.levy.dominating() {
        Dominating::Counting(atoms) if atoms.len() <= MAX_ENUMERATED_ATOMS => {
            Some(atoms.into_iter().filter(|&z| model.levy.intensity(z, theta) > 0.0).collect())
        }
        _ => None,
    };
    let active = model.levy.total_rate(theta) > 0.0;
    let mut levels = vec![ReachableSetSample { x, k: 0, points: vec![x], alpha_used: theta.to_vec(), exact: true }];
    for k in 1..=k_max {
        let prev = &levels[k - 1].points;
        let mut pts = Vec::new();
        let exact = support.is_some() || !active;
        if active && !prev.is_empty() {
            match &support {
                Some(atoms) => {
                    for &y in prev {
                        for &z in atoms {
                            pts.push(y + model.jump(y, z, theta));
                        }
                    }
                    pts.sort_by(f64::total_cmp);
                    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
                }
                None => {
                    let mut r = rng::stream(rng::splitmix(cfg.seed, k as u64));
                    for i in 0..cfg.samples_per_level {
                        let y = prev[i % prev.len()];
                        let z = model.levy.sample(theta, &mut r);
                        pts.push(y + model.jump(y, z, theta));
                    }
                }
            }
        }
        if let Some(&bad) = pts.iter().find(|p| !model.state_space.contains(**p)) {
            return Err(Error::DomainExit { state: bad, context: format!("in reachable level {k}") });
        }
        levels.push(ReachableSetSample { x, k, points: pts, alpha_used: theta.to_vec(), exact });
    }
    Ok(levels)
}

/// Where a residual was largest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualPoint {
    pub x: f64,
    /// `y` or `w`, depending on the line.
    pub at: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualLine {
    pub name: String,
    pub max_residual: f64,
    pub argmax: Option<ResidualPoint>,
    pub evaluations: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl ResidualLine {
    fn new(name: &str, tolerance: f64) -> Self {
        Self { name: name.into(), max_residual: 0.0, argmax: None, evaluations: 0, tolerance, pass: true }
    }

    fn record(&mut self, r: f64, x: f64, at: f64, theta: &[f64]) {
        self.evaluations += 1;
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if self.argmax.is_none() || r > self.max_residual {
            self.max_residual = r;
            self.argmax = Some(ResidualPoint { x, at, theta: theta.to_vec() });
        }
    }

    fn finish(mut self) -> Self {
        self.pass = self.max_residual <= self.tolerance;
        self
    }
}

/// Fitted matrices for the efficiency conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedK {
    pub theta: Vec<f64>,
    pub k1: Vec<Vec<f64>>,
    pub k1_condition: f64,
    pub k2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub lines: Vec<ResidualLine>,
    pub grid_sizes: BTreeMap<String, usize>,
    /// Samples dropped because φ underflowed.
    pub skipped: usize,
    pub fitted: Vec<FittedK>,
    pub pass: bool,
}

impl ConditionReport {
    fn assemble(condition: &str, lines: Vec<ResidualLine>, grid_sizes: BTreeMap<String, usize>, skipped: usize, fitted: Vec<FittedK>) -> Self {
        let lines: Vec<ResidualLine> = lines.into_iter().map(ResidualLine::finish).collect();
        let pass = lines.iter().all(|l| l.pass);
        Self { condition: condition.into(), lines, grid_sizes, skipped, fitted, pass }
    }

    pub fn line(&self, name: &str) -> Option<&ResidualLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

/// Default tolerance for analytic residual checks.
pub const CONDITION_TOL: f64 = 1e-6;

fn beta_row(ef: &dyn EstimatingFunction) -> Result<CoordSplit> {
    ef.coord_split().ok_or(Error::MissingCoordSplit)
}

/// Central difference in the α coordinates of a scalar function of θ.
fn alpha_gradient(alpha: &[usize], theta: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut th = theta.to_vec();
    let mut out = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let h = fd_step(theta[a]);
        th[a] = theta[a] + h;
        let up = f(&th)?;
        th[a] = theta[a] - h;
        let dn = f(&th)?;
        th[a] = theta[a];
        out.push((up - dn) / (2.0 * h));
    }
    Ok(out)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

/// Residuals of the four vanishing requirements on `g_β` over reachable sets.
pub fn check_condition_42(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta_grid: &[Vec<f64>],
    alpha_grid: &[Vec<f64>],
    x_grid: &[f64],
    reach: &ReachConfig,
    tol: f64,
) -> Result<ConditionReport> {
    let split = beta_row(ef)?;
    if x_grid.is_empty() || theta_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let d = ef.dim();
    let b = split.beta;
    let mut l1 = ResidualLine::new("g_beta_on_M1_to_M4", tol);
    let mut l2 = ResidualLine::new("dy_g_beta_on_M0_to_M3", tol);
    let mut l3 = ResidualLine::new("dy2_dalpha_g_beta_on_M0_to_M1", tol);
    let mut l4 = ResidualLine::new("dalpha_g1_beta_on_M1", tol);
    let mut buf = vec![0.0; d];
    let mut reach_points = 0;
    for at in alpha_grid {
        for &x in x_grid {
            let levels = reachable_sets(model, x, at, 4, reach)?;
            reach_points += levels.iter().map(|l| l.points.len()).sum::<usize>();
            for th in theta_grid {
                for lvl in &levels {
                    for &y in &lvl.points {
                        if (1..=4).contains(&lvl.k) {
                            ef.value(0.0, y, x, th, &mut buf)?;
                            l1.record(buf[b].abs(), x, y, th);
                        }
                        if lvl.k <= 3 {
                            ef.dy(0.0, y, x, th, &mut buf)?;
                            l2.record(buf[b].abs(), x, y, th);
                        }
                        if lvl.k <= 1 {
                            let grad = alpha_gradient(&split.alpha, th, |t| {
                                let mut v = vec![0.0; d];
                                ef.dy2(0.0, y, x, t, &mut v)?;
                                Ok(v[b])
                            })?;
                            l3.record(sup(&grad), x, y, th);
                        }
                        if lvl.k == 1 {
                            let grad = alpha_gradient(&split.alpha, th, |t| {
                                let mut v = vec![0.0; d];
                                ef.g1(y, x, t, &mut v)?;
                                Ok(v[b])
                            })?;
                            l4.record(sup(&grad), x, y, th);
                        }
                    }
                }
            }
        }
    }
    let sizes = BTreeMap::from([
        ("theta".to_string(), theta_grid.len()),
        ("alpha".to_string(), alpha_grid.len()),
        ("x".to_string(), x_grid.len()),
        ("reachable_points".to_string(), reach_points),
    ]);
    Ok(ConditionReport::assemble("4.2", vec![l1, l2, l3, l4], sizes, 0, Vec::new()))
}

/// Least-squares `K` with `t_i ≈ K r_i` for column pairs.
fn fit_k(targets: &[Vec<f64>], regressors: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = targets.len();
    let p = targets[0].len();
    let q = regressors[0].len();
    let rt = DMatrix::from_fn(m, q, |i, j| regressors[i][j]);
    let tt = DMatrix::from_fn(m, p, |i, j| targets[i][j]);
    let x = rt.svd(true, true).solve(&tt, 1e-14).map_err(|e| Error::Invalid(format!("least-squares fit failed: {e}")))?;
    Ok(x.transpose())
}

fn jump_samples(model: &JumpDiffusionModel, x: f64, theta: &[f64], w_samples: &[f64]) -> Result<Vec<f64>> {
    let tr = model.transform.as_ref().ok_or_else(|| Error::Invalid(format!("model {} has no transformed jump density", model.name)))?;
    Ok(match tr.support(x, theta) {
        JumpSupport::Points(p) => p,
        JumpSupport::Interval(lo, hi) => w_samples.iter().copied().filter(|w| *w > lo && *w < hi).collect(),
    })
}

/// `∂α φ / φ`, or `None` when φ underflows.
fn phi_score(model: &JumpDiffusionModel, x: f64, w: f64, theta: &[f64]) -> Option<Vec<f64>> {
    let tr = model.transform.as_ref()?;
    let phi = tr.phi(x, w, theta);
    if !(phi > 1e-300) {
        return None;
    }
    Some(tr.phi_dalpha(x, w, theta).into_iter().map(|v| v / phi).collect())
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn apply(k: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
    (0..k.nrows()).map(|i| (0..k.ncols()).map(|j| k[(i, j)] * r[j]).sum()).collect()
}

/// Shared α-block fit: `∂y g_α(0,x,x) = K ∂αaᵀ/b²` and
/// `g_α(0,x+w,x) = K ∂αφᵀ/φ`.
#[allow(clippy::too_many_arguments)]
fn alpha_block_lines(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    rows_idx: &[usize],
    alpha_idx: &[usize],
    theta: &[f64],
    x_grid: &[f64],
    w_samples: &[f64],
    first: &mut ResidualLine,
    second: &mut ResidualLine,
    skipped: &mut usize,
) -> Result<DMatrix<f64>> {
    let mut targets = Vec::new();
    let mut regs = Vec::new();
    for &x in x_grid {
        let (_, gy, _) = local(ef, x, x, theta)?;
        let b2 = model.diffusion(x, theta).powi(2);
        targets.push(pick(&gy, rows_idx));
        regs.push(pick(&model.coeffs.drift_dtheta(x, theta), alpha_idx).into_iter().map(|v| v / b2).collect::<Vec<f64>>());
    }
    let k = fit_k(&targets, &regs)?;
    for (i, &x) in x_grid.iter().enumerate() {
        let fitted = apply(&k, &regs[i]);
        let r: Vec<f64> = targets[i].iter().zip(&fitted).map(|(a, b)| a - b).collect();
        first.record(sup(&r), x, x, theta);
    }
    let d = ef.dim();
    let mut g = vec![0.0; d];
    for &x in x_grid {
        for w in jump_samples(model, x, theta, w_samples)? {
            let Some(score) = phi_score(model, x, w, theta) else {
                *skipped += 1;
                continue;
            };
            ef.value(0.0, x + w, x, theta, &mut g)?;
            let fitted = apply(&k, &score);
            let r: Vec<f64> = pick(&g, rows_idx).iter().zip(&fitted).map(|(a, b)| a - b).collect();
            second.record(sup(&r), x, w, theta);
        }
    }
    Ok(k)
}

/// Efficiency condition for drift-jump-only models: fits `K_α` on the
/// continuous part, then checks the jump part under the same `K_α`.
pub fn check_condition_41(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    alpha_grid: &[Vec<f64>],
    x_grid: &[f64],
    w_samples: &[f64],
    tol: f64,
) -> Result<ConditionReport> {
    if model.d2() != 0 {
        return Err(Error::DimensionMismatch("condition 4.1 applies to models without diffusion parameters".into()));
    }
    if x_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let d = ef.dim();
    if d != model.d1() {
        return Err(Error::DimensionMismatch(format!("EF dimension {d} vs d1 = {}", model.d1())));
    }
    let idx: Vec<usize> = (0..d).collect();
    let mut first = ResidualLine::new("first_equation", tol);
    let mut second = ResidualLine::new("second_equation", tol);
    let mut inv = ResidualLine::new("k_condition_number", 1e12);
    let mut skipped = 0;
    let mut fitted = Vec::new();
    for a in alpha_grid {
        model.param_box.check(a)?;
        let k = alpha_block_lines(ef, model, &idx, &idx, a, x_grid, w_samples, &mut first, &mut second, &mut skipped)?;
        let cond = condition_number(&k);
        inv.record(cond, f64::NAN, f64::NAN, a);
        fitted.push(FittedK { theta: a.clone(), k1: rows(&k), k1_condition: cond, k2: None });
    }
    let sizes = BTreeMap::from([
        ("alpha".to_string(), alpha_grid.len()),
        ("x".to_string(), x_grid.len()),
        ("w".to_string(), w_samples.len()),
    ]);
    Ok(ConditionReport::assemble("4.1", vec![first, second, inv], sizes, skipped, fitted))
}

/// Efficiency condition for the `(α, β)` layout: α-block as in 4.1 plus
/// `∂²y g_β(0,x,x) = K2 ∂β b² / b⁴`.
pub fn check_condition_43(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta_grid: &[Vec<f64>],
    x_grid: &[f64],
    w_samples: &[f64],
    tol: f64,
) -> Result<ConditionReport> {
    let split = beta_row(ef)?;
    if x_grid.is_empty() || theta_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if model.d2() != 1 || split.alpha.len() != model.d1() {
        return Err(Error::DimensionMismatch("condition 4.3 needs one diffusion parameter and a matching split".into()));
    }
    let beta_idx = model.d1();
    let mut first = ResidualLine::new("alpha_continuous_equation", tol);
    let mut third = ResidualLine::new("alpha_jump_equation", tol);
    let mut second = ResidualLine::new("beta_equation", tol);
    let mut inv = ResidualLine::new("k1_condition_number", 1e12);
    let mut k2_line = ResidualLine::new("k2_inverse_magnitude", 1e12);
    let mut skipped = 0;
    let mut fitted = Vec::new();
    let alpha_idx: Vec<usize> = (0..model.d1()).collect();
    for th in theta_grid {
        model.param_box.check(th)?;
        let k1 = alpha_block_lines(ef, model, &split.alpha, &alpha_idx, th, x_grid, w_samples, &mut first, &mut third, &mut skipped)?;
        let mut targets = Vec::new();
        let mut regs = Vec::new();
        for &x in x_grid {
            let (_, _, gyy) = local(ef, x, x, th)?;
            let b2 = model.diffusion(x, th).powi(2);
            targets.push(vec![gyy[split.beta]]);
            regs.push(vec![model.coeffs.diffusion_sq_dtheta(x, th)[beta_idx] / (b2 * b2)]);
        }
        let k2 = fit_k(&targets, &regs)?[(0, 0)];
        for (i, &x) in x_grid.iter().enumerate() {
            second.record((targets[i][0] - k2 * regs[i][0]).abs(), x, x, th);
        }
        let cond = condition_number(&k1);
        inv.record(cond, f64::NAN, f64::NAN, th);
        k2_line.record(if k2 == 0.0 { f64::INFINITY } else { 1.0 / k2.abs() }, f64::NAN, f64::NAN, th);
        fitted.push(FittedK { theta: th.clone(), k1: rows(&k1), k1_condition: cond, k2: Some(k2) });
    }
    let sizes = BTreeMap::from([
        ("theta".to_string(), theta_grid.len()),
        ("x".to_string(), x_grid.len()),
        ("w".to_string(), w_samples.len()),
    ]);
    Ok(ConditionReport::assemble("4.3", vec![first, second, third, inv, k2_line], sizes, skipped, fitted))
}

/// Limits for the `(α, β)` layout and the block asymptotic variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem42Objects {
    pub b1: Vec<Vec<f64>>,
    pub b1_se: Vec<Vec<f64>>,
    pub b2: f64,
    pub b2_se: f64,
    pub d1: Vec<Vec<f64>>,
    pub d1_se: Vec<Vec<f64>>,
    pub d2: f64,
    pub d2_se: f64,
    /// `diag(B1⁻¹ D1 B1⁻ᵀ, D2 / B2²)`.
    pub v: Vec<Vec<f64>>,
    pub v_se: Vec<Vec<f64>>,
    /// `D2 = 0`, which the rate result excludes.
    pub d2_degenerate: bool,
    pub points: usize,
}

pub fn population_theorem42(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta0: &[f64],
    cfg: &ErgodicConfig,
) -> Result<Theorem42Objects> {
    let split = beta_row(ef)?;
    model.param_box.check(theta0)?;
    let p = split.alpha.len();
    let b = split.beta;
    let d = ef.dim();
    let beta_idx = model.d1();
    let alpha_idx: Vec<usize> = (0..model.d1()).collect();
    if alpha_idx.len() != p || model.d2() != 1 {
        return Err(Error::DimensionMismatch("block limits need d2 = 1 and an α split matching d1".into()));
    }
    let f = |x: f64| -> Result<Vec<f64>> {
        let (_, gy, gyy) = local(ef, x, x, theta0)?;
        let da = pick(&model.coeffs.drift_dtheta(x, theta0), &alpha_idx);
        let bx = model.diffusion(x, theta0);
        let b2 = bx * bx;
        let gya = pick(&gy, &split.alpha);
        let mut b1 = vec![0.0; p * p];
        let mut d1 = vec![0.0; p * p];
        for j in 0..p {
            for k in 0..p {
                b1[j * p + k] = -gya[j] * da[k];
                d1[j * p + k] = b2 * gya[j] * gya[k];
            }
        }
        let nodes = model.levy_nodes(theta0)?;
        let (mut g, mut gyj) = (vec![0.0; d], vec![0.0; d]);
        for (&z, &w) in nodes.z.iter().zip(&nodes.w) {
            let c = model.jump(x, z, theta0);
            let dc = pick(&model.coeffs.jump_dtheta(x, z, theta0), &alpha_idx);
            let q = model.levy.intensity(z, theta0);
            let dq = pick(&model.levy.intensity_dtheta(z, theta0), &alpha_idx);
            ef.value(0.0, x + c, x, theta0, &mut g)?;
            ef.dy(0.0, x + c, x, theta0, &mut gyj)?;
            let (ga, gyja) = (pick(&g, &split.alpha), pick(&gyj, &split.alpha));
            for j in 0..p {
                for k in 0..p {
                    let score = if q > 0.0 { dq[k] / q } else { 0.0 };
                    b1[j * p + k] -= w * (gyja[j] * dc[k] + ga[j] * score);
                    d1[j * p + k] += w * ga[j] * ga[k];
                }
            }
        }
        let db2 = model.coeffs.diffusion_sq_dtheta(x, theta0)[beta_idx];
        let mut v = b1;
        v.extend(d1);
        v.push(-0.5 * gyy[b] * db2);
        v.push(0.5 * b2 * b2 * gyy[b] * gyy[b]);
        Ok(v)
    };
    let est = ergodic_average(&f, model, theta0, cfg)?;
    let (m, s) = (&est.mean, &est.se);
    let pp = p * p;
    let (vv, vse) = est.functional(|m| {
        let b1 = square(&m[..pp], p);
        let d1 = square(&m[pp..2 * pp], p);
        let inv = b1.try_inverse().ok_or_else(|| Error::SingularJacobian { condition: f64::INFINITY, iterate: theta0.to_vec() })?;
        let v1 = &inv * d1 * inv.transpose();
        let (b2, d2) = (m[2 * pp], m[2 * pp + 1]);
        if b2 == 0.0 {
            return Err(Error::ZeroDenominator("B2 = 0".into()));
        }
        let mut full = DMatrix::zeros(p + 1, p + 1);
        full.view_mut((0, 0), (p, p)).copy_from(&v1);
        full[(p, p)] = d2 / (b2 * b2);
        Ok(rows(&full).concat())
    })?;
    let d2 = m[2 * pp + 1];
    Ok(Theorem42Objects {
        b1: block(m, 0, p),
        b1_se: block(s, 0, p),
        b2: m[2 * pp],
        b2_se: s[2 * pp],
        d1: block(m, pp, p),
        d1_se: block(s, pp, p),
        d2,
        d2_se: s[2 * pp + 1],
        v: block(&vv, 0, p + 1),
        v_se: block(&vse, 0, p + 1),
        d2_degenerate: d2 == 0.0,
        points: est.points,
    })
}

/// Fisher information blocks with their inverse.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherInformation {
    pub i1: Vec<Vec<f64>>,
    pub i1_se: Vec<Vec<f64>>,
    pub i2: Vec<Vec<f64>>,
    pub i2_se: Vec<Vec<f64>>,
    /// Block-diagonal `I(θ)`.
    pub information: Vec<Vec<f64>>,
    pub inverse: Vec<Vec<f64>>,
    pub inverse_se: Vec<Vec<f64>>,
    /// Jump nodes dropped because φ underflowed.
    pub skipped: usize,
    pub points: usize,
}

fn psd_check(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let sym = (m + m.transpose()) * 0.5;
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    if min < -1e-10 {
        return Err(Error::NotPositiveSemidefinite(min));
    }
    Ok(())
}

/// `I1 = ∫ (∂αaᵀ∂αa / b² + ∫ ∂αφᵀ∂αφ / φ dη) dπ` and
/// `I2 = ∫ ∂βb²ᵀ∂βb² / (2b⁴) dπ`. The inner jump integral runs over the
/// mark nodes of ν_θ mapped through `c`.
pub fn fisher_information(model: &JumpDiffusionModel, theta: &[f64], cfg: &ErgodicConfig) -> Result<FisherInformation> {
    let tr = model.transform.clone().ok_or_else(|| Error::Invalid(format!("model {} has no transformed jump density", model.name)))?;
    model.param_box.check(theta)?;
    let d1 = model.d1();
    let d2 = model.d2();
    let skipped = std::sync::atomic::AtomicUsize::new(0);
    let f = |x: f64| -> Result<Vec<f64>> {
        let da = model.coeffs.drift_dtheta(x, theta);
        let db2 = model.coeffs.diffusion_sq_dtheta(x, theta);
        let b2 = model.diffusion(x, theta).powi(2);
        let mut v = vec![0.0; d1 * d1 + d2 * d2];
        for j in 0..d1 {
            for k in 0..d1 {
                v[j * d1 + k] = da[j] * da[k] / b2;
            }
        }
        let nodes = model.levy_nodes(theta)?;
        for (&z, &w) in nodes.z.iter().zip(&nodes.w) {
            let jump = model.jump(x, z, theta);
            let phi = tr.phi(x, jump, theta);
            if !(phi > 1e-300) {
                skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                continue;
            }
            let s: Vec<f64> = tr.phi_dalpha(x, jump, theta).iter().map(|g| g / phi).collect();
            for j in 0..d1 {
                for k in 0..d1 {
                    v[j * d1 + k] += w * s[j] * s[k];
                }
            }
        }
        let off = d1 * d1;
        for j in 0..d2 {
            for k in 0..d2 {
                v[off + j * d2 + k] = db2[d1 + j] * db2[d1 + k] / (2.0 * b2 * b2);
            }
        }
        Ok(v)
    };
    let est = ergodic_average(&f, model, theta, cfg)?;
    let off = d1 * d1;
    let i1 = square(&est.mean[..off], d1);
    let i2 = square(&est.mean[off..], d2);
    psd_check(&i1)?;
    psd_check(&i2)?;
    let d = d1 + d2;
    let assemble = |m: &[f64]| {
        let mut full = DMatrix::zeros(d, d);
        full.view_mut((0, 0), (d1, d1)).copy_from(&square(&m[..off], d1));
        full.view_mut((d1, d1), (d2, d2)).copy_from(&square(&m[off..], d2));
        full
    };
    let information = assemble(&est.mean);
    let (inv, inv_se) = est.functional(|m| {
        let inv = assemble(m).try_inverse().ok_or_else(|| Error::SingularJacobian { condition: f64::INFINITY, iterate: theta.to_vec() })?;
        Ok(rows(&inv).concat())
    })?;
    Ok(FisherInformation {
        i1: rows(&i1),
        i1_se: block(&est.se, 0, d1),
        i2: rows(&i2),
        i2_se: block(&est.se, off, d2),
        information: rows(&information),
        inverse: block(&inv, 0, d),
        inverse_se: block(&inv_se, 0, d),
        skipped: skipped.into_inner(),
        points: est.points,
    })
}

/// `|∫ φ(x, w, θ) η_x(dw) − ξ(θ)|`, the mass check for the transformed
/// density.
pub fn mass_defect(model: &JumpDiffusionModel, x: f64, theta: &[f64]) -> Result<f64> {
    let tr = model.transform.as_ref().ok_or_else(|| Error::Invalid(format!("model {} has no transformed jump density", model.name)))?;
    let xi = model.levy.total_rate(theta);
    let mass = match tr.support(x, theta) {
        JumpSupport::Points(p) => p.iter().map(|&w| tr.phi(x, w, theta)).sum(),
        JumpSupport::Interval(lo, hi) if lo.is_infinite() && hi.is_infinite() => {
            quadrature::integrate_real_line(&|w| tr.phi(x, w, theta), &model.quadrature)?.value
        }
        JumpSupport::Interval(lo, hi) => quadrature::integrate_interval(&|w| tr.phi(x, w, theta), lo, hi, &model.quadrature)?.value,
    };
    Ok((mass - xi).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estfun::{build_ef, make_quadratic_ef, ConstantWeight, EfName, FnEf};
    use crate::model::{make_builtin_model, BuiltinModel, BuiltinName, JumpLaw};
    use std::sync::Arc;

    fn short() -> ErgodicConfig {
        ErgodicConfig { horizon: 200.0, delta: 0.05, substeps: 8, burn_in: 10.0, ..ErgodicConfig::default() }
    }

    #[test]
    fn constant_average_is_exact() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        let e = ergodic_average(&|_| Ok(vec![1.0]), &m, &[1.0, 0.0, 1.0], &short()).unwrap();
        assert_eq!(e.mean[0], 1.0);
    }

    #[test]
    fn a_vanishes_on_the_diagonal() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        let ef = make_quadratic_ef(&m, None, None).unwrap();
        let th = [1.0, 0.5];
        let abc = population_abc(&ef, &m, &th, &th, &short()).unwrap();
        assert!(abc.a.iter().all(|a| *a == 0.0));
        assert!(abc.route_discrepancy().unwrap() < 3.0);
        // Example closed forms: B = diag(−∫x²/β², −2β), C22 = β⁴γ4.
        assert!((abc.b[1][1] + 1.0).abs() < 1e-6);
        assert!((abc.c[1][1] - 0.0625 * 1.62).abs() < 1e-6);
    }

    #[test]
    fn zero_second_weight_gives_singular_b() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        let ef = make_quadratic_ef(&m, None, Some(Arc::new(ConstantWeight(0.0)))).unwrap();
        let rep = check_assumption_31(&ef, &m, &[vec![1.0, 0.5], vec![1.5, 0.6]], &[1.0, 0.5], &short()).unwrap();
        assert_eq!(rep.excluded, 1);
        assert!(!rep.b_nonsingular && !rep.pass && rep.b_condition > 1e12);
    }

    #[test]
    fn two_sign_lattice_enumerates() {
        let jumps = JumpLaw::Atoms { atoms: vec![-1.0, 1.0], probs: vec![0.5, 0.5], rate: 1.0 };
        let m = BuiltinModel::OuAdditiveJumps { jumps }.build().unwrap();
        let lv = reachable_sets(&m, 0.0, &[1.0, 0.0, 1.0], 2, &ReachConfig::default()).unwrap();
        assert_eq!(lv[0].points, vec![0.0]);
        assert_eq!(lv[2].points, vec![-2.0, 0.0, 2.0]);
        assert!(lv[2].exact);
    }

    #[test]
    fn condition_42_lattice_and_quadratic() {
        let jumps = JumpLaw::Atoms { atoms: vec![-2.0, 2.0], probs: vec![0.5, 0.5], rate: 1.0 };
        let m = BuiltinModel::OuAdditiveJumps { jumps: jumps.clone() }.build().unwrap();
        let ef = build_ef(EfName::RateOptimalLattice, &m, Some(&jumps)).unwrap();
        let th = vec![vec![1.0, 0.0, 0.5], vec![2.0, 0.5, 1.0]];
        let xs = [-1.0, 0.0, 0.7];
        let rep = check_condition_42(ef.as_ref(), &m, &th, &th, &xs, &ReachConfig::default(), 1e-9).unwrap();
        assert!(rep.pass, "{rep:?}");
        let generic = FnEf::new("generic", 3, |t, y, x, th, o| {
            o[0] = y - x;
            o[1] = (y - x) * x;
            o[2] = (y - x - t * th[0]).powi(2) - t * th[2] * th[2];
        })
        .with_coord_split(CoordSplit { alpha: vec![0, 1], beta: 2 });
        let rep = check_condition_42(&generic, &m, &th, &th, &xs, &ReachConfig::default(), 1e-9).unwrap();
        assert!(rep.line("g_beta_on_M1_to_M4").unwrap().max_residual > 1.0);
        assert_eq!(check_condition_42(&generic, &m, &th, &th, &[], &ReachConfig::default(), 1e-9).unwrap_err(), Error::EmptyGrid);
    }

    #[test]
    fn condition_41_matching_and_generic() {
        let m = make_builtin_model(BuiltinName::DriftjumpKnownDiffusion);
        let ws: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
        let xs = [-1.5, -0.3, 0.4, 1.2];
        let a = vec![vec![0.3], vec![-0.5]];
        let ef = build_ef(EfName::LinearDrift, &m, None).unwrap();
        let rep = check_condition_41(ef.as_ref(), &m, &a, &xs, &ws, 1e-8).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!((rep.fitted[0].k1[0][0] - 1.0).abs() < 1e-12);
        let generic = build_ef(EfName::LinearDriftGeneric, &m, None).unwrap();
        let rep = check_condition_41(generic.as_ref(), &m, &a, &xs, &ws, 1e-8).unwrap();
        assert!(rep.line("first_equation").unwrap().max_residual > 0.1);
    }

    #[test]
    fn fisher_diffusion_block_closed_form() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        let fi = fisher_information(&m, &[1.0, 0.0, 2.0], &short()).unwrap();
        assert!((fi.i2[0][0] - 0.5).abs() <= 3.0 * fi.i2_se[0][0]);
        assert!(mass_defect(&m, 0.3, &[1.0, 0.0, 2.0]).unwrap() < 1e-6);
    }

    #[test]
    fn block_objects_constant_diffusion_d2() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        // ∂²y g_β(0,x,x) = 2/β² with b = β gives D2 = 2.
        let ef = FnEf::new("d2", 3, |_, y, x, th, o| {
            o[0] = y - x;
            o[1] = (y - x) * x;
            o[2] = (y - x).powi(2) / (th[2] * th[2]);
        })
        .with_coord_split(CoordSplit { alpha: vec![0, 1], beta: 2 })
        .with_dy2(|_, _, _, th, o| {
            o[0] = 0.0;
            o[1] = 0.0;
            o[2] = 2.0 / (th[2] * th[2]);
        });
        let t = population_theorem42(&ef, &m, &[1.0, 0.0, 0.7], &short()).unwrap();
        assert!((t.d2 - 2.0).abs() < 1e-9);
        assert!(!t.d2_degenerate);
    }
}
