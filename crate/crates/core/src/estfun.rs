//! Approximate martingale estimating functions `g(t, y, x, θ)`.
//!
//! Matrices are row-major `d×d` slices with entry `(i, j) = ∂θj g_i`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::apply_generator_with;
use crate::model::{JumpDiffusionModel, JumpLaw};
use crate::parallel;
use crate::rng;
use crate::simulate;
use crate::stats;

/// Indices of the α rows and the β row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordSplit {
    pub alpha: Vec<usize>,
    pub beta: usize,
}

pub trait EstimatingFunction: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn kappa0(&self) -> f64;
    fn exact_martingale(&self) -> bool {
        false
    }
    fn coord_split(&self) -> Option<CoordSplit> {
        None
    }
    fn value(&self, t: f64, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    fn dtheta(&self, t: f64, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    fn value_and_dtheta(&self, t: f64, y: f64, x: f64, theta: &[f64], val: &mut [f64], jac: &mut [f64]) -> Result<()> {
        self.value(t, y, x, theta, val)?;
        self.dtheta(t, y, x, theta, jac)
    }
    fn dy(&self, t: f64, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    fn dy2(&self, t: f64, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    /// `∂t g` at `t = 0`.
    fn g1(&self, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    /// `∂²t g` at `t = 0` when available.
    fn g2(&self, _y: f64, _x: f64, _theta: &[f64], _out: &mut [f64]) -> Result<bool> {
        Ok(false)
    }
}

impl dyn EstimatingFunction {
    pub fn g(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.value(t, y, x, theta, &mut v)?;
        Ok(v)
    }

    pub fn g0(&self, y: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        self.g(0.0, y, x, theta)
    }

    pub fn jacobian(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut v = vec![0.0; d * d];
        self.dtheta(t, y, x, theta, &mut v)?;
        Ok(DMatrix::from_row_slice(d, d, &v))
    }

    pub fn dy_vec(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.dy(t, y, x, theta, &mut v)?;
        Ok(v)
    }

    pub fn dy2_vec(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.dy2(t, y, x, theta, &mut v)?;
        Ok(v)
    }

    pub fn g1_vec(&self, y: f64, x: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        self.g1(y, x, theta, &mut v)?;
        Ok(v)
    }

    pub fn g2_vec(&self, y: f64, x: f64, theta: &[f64]) -> Result<Option<Vec<f64>>> {
        let mut v = vec![0.0; self.dim()];
        Ok(self.g2(y, x, theta, &mut v)?.then_some(v))
    }
}

/// Central-difference `∂θ g`, for estimating functions without analytic
/// parameter derivatives.
pub fn fd_dtheta(ef: &dyn EstimatingFunction, t: f64, y: f64, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()> {
    let d = ef.dim();
    let k = theta.len();
    let mut th = theta.to_vec();
    let mut up = vec![0.0; d];
    let mut dn = vec![0.0; d];
    for j in 0..k {
        let h = f64::EPSILON.cbrt() * theta[j].abs().max(1.0);
        th[j] = theta[j] + h;
        ef.value(t, y, x, &th, &mut up)?;
        th[j] = theta[j] - h;
        ef.value(t, y, x, &th, &mut dn)?;
        th[j] = theta[j];
        for i in 0..d {
            out[i * k + j] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    Ok(())
}

fn fd_grad(f: impl Fn(&[f64]) -> Result<f64>, theta: &[f64], out: &mut [f64]) -> Result<()> {
    let mut th = theta.to_vec();
    for j in 0..theta.len() {
        let h = f64::EPSILON.cbrt() * theta[j].abs().max(1.0);
        th[j] = theta[j] + h;
        let up = f(&th)?;
        th[j] = theta[j] - h;
        let dn = f(&th)?;
        th[j] = theta[j];
        out[j] = (up - dn) / (2.0 * h);
    }
    Ok(())
}

/// Scalar weight `m(x, θ)`.
pub trait Weight: Send + Sync {
    fn value(&self, x: f64, theta: &[f64]) -> Result<f64>;
    /// Defaults to central differences.
    fn dtheta(&self, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()> {
        fd_grad(|t| self.value(x, t), theta, out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantWeight(pub f64);

impl Weight for ConstantWeight {
    fn value(&self, _: f64, _: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
    fn dtheta(&self, _: f64, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

/// Closure weight; gradient by central differences.
pub struct FnWeight<F>(pub F);

impl<F: Fn(f64, &[f64]) -> f64 + Send + Sync> Weight for FnWeight<F> {
    fn value(&self, x: f64, theta: &[f64]) -> Result<f64> {
        Ok((self.0)(x, theta))
    }
}

/// `∂θj μ1 / μ2`, the default first-row weight (∂α ã / b̃²).
pub struct MeanScoreWeight {
    pub model: JumpDiffusionModel,
    pub index: usize,
}

impl Weight for MeanScoreWeight {
    fn value(&self, x: f64, theta: &[f64]) -> Result<f64> {
        let r = self.model.moment_rates(x, theta)?;
        Ok(r.mean_dtheta[self.index] / r.var)
    }
}

/// The quadratic estimating function
/// `g = (m1 (y − x − t μ1), m2 ((y − x − t μ1)² − t μ2))`
/// with `μ1, μ2` the model's conditional mean and variance rates.
pub struct QuadraticEf {
    model: JumpDiffusionModel,
    m1: Arc<dyn Weight>,
    m2: Arc<dyn Weight>,
}

/// Builds the quadratic estimating function. `None` weights select
/// `m1 = ∂α μ1 / μ2` and `m2 = 1`.
pub fn make_quadratic_ef(
    model: &JumpDiffusionModel,
    m1: Option<Arc<dyn Weight>>,
    m2: Option<Arc<dyn Weight>>,
) -> Result<QuadraticEf> {
    if model.d1() != 1 || model.d2() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "quadratic EF needs d1 = d2 = 1, model has d1 = {}, d2 = {}",
            model.d1(),
            model.d2()
        )));
    }
    Ok(QuadraticEf {
        model: model.clone(),
        m1: m1.unwrap_or_else(|| Arc::new(MeanScoreWeight { model: model.clone(), index: 0 })),
        m2: m2.unwrap_or_else(|| Arc::new(ConstantWeight(1.0))),
    })
}

impl EstimatingFunction for QuadraticEf {
    fn name(&self) -> &str {
        "quadratic"
    }
    fn dim(&self) -> usize {
        2
    }
    fn kappa0(&self) -> f64 {
        2.0
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        let u = y - x - t * r.mean;
        out[0] = self.m1.value(x, th)? * u;
        out[1] = self.m2.value(x, th)? * (u * u - t * r.var);
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let mut v = [0.0; 2];
        self.value_and_dtheta(t, y, x, th, &mut v, out)
    }
    fn value_and_dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], val: &mut [f64], jac: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        let u = y - x - t * r.mean;
        let m1 = self.m1.value(x, th)?;
        let m2 = self.m2.value(x, th)?;
        let mut dm1 = [0.0; 2];
        let mut dm2 = [0.0; 2];
        self.m1.dtheta(x, th, &mut dm1)?;
        self.m2.dtheta(x, th, &mut dm2)?;
        let q = u * u - t * r.var;
        val[0] = m1 * u;
        val[1] = m2 * q;
        for j in 0..2 {
            jac[j] = dm1[j] * u - m1 * t * r.mean_dtheta[j];
            jac[2 + j] = dm2[j] * q + m2 * (-2.0 * u * t * r.mean_dtheta[j] - t * r.var_dtheta[j]);
        }
        Ok(())
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        out[0] = self.m1.value(x, th)?;
        out[1] = 2.0 * self.m2.value(x, th)? * (y - x - t * r.mean);
        Ok(())
    }
    fn dy2(&self, _t: f64, _y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = 0.0;
        out[1] = 2.0 * self.m2.value(x, th)?;
        Ok(())
    }
    fn g1(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        out[0] = -self.m1.value(x, th)? * r.mean;
        out[1] = self.m2.value(x, th)? * (-2.0 * (y - x) * r.mean - r.var);
        Ok(())
    }
    fn g2(&self, _y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<bool> {
        let r = self.model.moment_rates(x, th)?;
        out[0] = 0.0;
        out[1] = 2.0 * self.m2.value(x, th)? * r.mean * r.mean;
        Ok(true)
    }
}

/// Vector weight `m(x, θ) ∈ ℝ^k`; `dtheta` fills a row-major `k×d` block.
#[allow(clippy::len_without_is_empty)]
pub trait VectorWeight: Send + Sync {
    fn len(&self) -> usize;
    fn value(&self, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;
    fn dtheta(&self, x: f64, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let k = self.len();
        let d = theta.len();
        let mut th = theta.to_vec();
        let mut up = vec![0.0; k];
        let mut dn = vec![0.0; k];
        for j in 0..d {
            let h = f64::EPSILON.cbrt() * theta[j].abs().max(1.0);
            th[j] = theta[j] + h;
            self.value(x, &th, &mut up)?;
            th[j] = theta[j] - h;
            self.value(x, &th, &mut dn)?;
            th[j] = theta[j];
            for i in 0..k {
                out[i * d + j] = (up[i] - dn[i]) / (2.0 * h);
            }
        }
        Ok(())
    }
}

/// `∂α a(x, α)ᵀ / b²(x)`.
pub struct DriftOverDiffusion {
    pub model: JumpDiffusionModel,
}

impl VectorWeight for DriftOverDiffusion {
    fn len(&self) -> usize {
        self.model.d1()
    }
    fn value(&self, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let da = self.model.coeffs.drift_dtheta(x, th);
        let b = self.model.diffusion(x, th);
        for (o, d) in out.iter_mut().zip(&da) {
            *o = d / (b * b);
        }
        Ok(())
    }
}

/// Closure vector weight.
pub struct FnVectorWeight<F> {
    pub len: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64]) + Send + Sync> VectorWeight for FnVectorWeight<F> {
    fn len(&self) -> usize {
        self.len
    }
    fn value(&self, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(x, th, out);
        Ok(())
    }
}

/// Rows `m_j(x, θ) (y − x − t μ1(x, θ))`, one per drift-jump coordinate.
pub struct LinearDriftEf {
    model: JumpDiffusionModel,
    weight: Arc<dyn VectorWeight>,
    name: String,
}

/// Linear estimating function for models without diffusion parameters. The
/// default weight is `∂α a / b²`.
pub fn make_linear_drift_ef(model: &JumpDiffusionModel) -> Result<LinearDriftEf> {
    make_weighted_linear_drift_ef(model, Arc::new(DriftOverDiffusion { model: model.clone() }), "linear_drift")
}

pub fn make_weighted_linear_drift_ef(
    model: &JumpDiffusionModel,
    weight: Arc<dyn VectorWeight>,
    name: &str,
) -> Result<LinearDriftEf> {
    if model.d2() != 0 {
        return Err(Error::DimensionMismatch(format!("linear-drift EF needs d2 = 0, model has d2 = {}", model.d2())));
    }
    if weight.len() != model.d1() {
        return Err(Error::DimensionMismatch(format!("weight has length {}, model has d1 = {}", weight.len(), model.d1())));
    }
    Ok(LinearDriftEf { model: model.clone(), weight, name: name.to_string() })
}

impl EstimatingFunction for LinearDriftEf {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.model.d1()
    }
    fn kappa0(&self) -> f64 {
        2.0
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        self.weight.value(x, th, out)?;
        let u = y - x - t * r.mean;
        out.iter_mut().for_each(|v| *v *= u);
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let r = self.model.moment_rates(x, th)?;
        let mut m = vec![0.0; d];
        self.weight.value(x, th, &mut m)?;
        self.weight.dtheta(x, th, out)?;
        let u = y - x - t * r.mean;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] * u - m[i] * t * r.mean_dtheta[j];
            }
        }
        Ok(())
    }
    fn dy(&self, _t: f64, _y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        self.weight.value(x, th, out)
    }
    fn dy2(&self, _t: f64, _y: f64, _x: f64, _th: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
    fn g1(&self, _y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.model.moment_rates(x, th)?;
        self.weight.value(x, th, out)?;
        out.iter_mut().for_each(|v| *v *= -r.mean);
        Ok(())
    }
    fn g2(&self, _y: f64, _x: f64, _th: &[f64], out: &mut [f64]) -> Result<bool> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(true)
    }
}

/// Exact conditional mean of the OU model with additive jumps:
/// `μ_t(x) = c∞ + (x − c∞) e^{−α1 t}`, `c∞ = α2 + ξ E Z / α1`.
#[derive(Debug, Clone, Copy)]
struct OuMean {
    mu: f64,
    dmu: [f64; 3],
    /// `∂t μ` and `∂²t μ` at `t = 0`.
    mu_dot0: f64,
    mu_ddot0: f64,
}

fn ou_mean(t: f64, x: f64, th: &[f64], jump_mean_rate: f64) -> OuMean {
    let (a1, a2) = (th[0], th[1]);
    let e = (-a1 * t).exp();
    let cinf = a2 + jump_mean_rate / a1;
    let dcinf_a1 = -jump_mean_rate / (a1 * a1);
    OuMean {
        // Exact at t = 0 so that g(0, x, x, θ) vanishes without rounding.
        mu: if t == 0.0 { x } else { cinf + (x - cinf) * e },
        dmu: [dcinf_a1 * (1.0 - e) - t * (x - cinf) * e, 1.0 - e, 0.0],
        mu_dot0: -a1 * (x - cinf),
        mu_ddot0: a1 * a1 * (x - cinf),
    }
}

fn ou_weights(x: f64, th: &[f64]) -> ([f64; 2], [[f64; 3]; 2]) {
    let (a1, a2, b) = (th[0], th[1], th[2]);
    let b2 = b * b;
    let b3 = b2 * b;
    (
        [-(x - a2) / b2, a1 / b2],
        [[0.0, 1.0 / b2, 2.0 * (x - a2) / b3], [1.0 / b2, 0.0, -2.0 * a1 / b3]],
    )
}

fn require_ou(model: &JumpDiffusionModel) -> Result<()> {
    if model.name != "ou_additive_jumps" {
        return Err(Error::Invalid(format!("this estimating function is built for ou_additive_jumps, got {}", model.name)));
    }
    Ok(())
}

/// Exact martingale estimating function for the OU model with additive jumps:
/// rows `∂α a/β² (y − μ_t(x))` and `(y − μ_t(x))² − v_t`, with the exact
/// conditional mean and variance.
pub struct OuExactEf {
    jump_mean_rate: f64,
    jump_var_rate: f64,
}

pub fn make_ou_exact_ef(model: &JumpDiffusionModel, jumps: &JumpLaw) -> Result<OuExactEf> {
    require_ou(model)?;
    Ok(OuExactEf { jump_mean_rate: jumps.rate() * jumps.raw_moment(1), jump_var_rate: jumps.rate() * jumps.raw_moment(2) })
}

impl OuExactEf {
    fn var(&self, t: f64, th: &[f64]) -> (f64, [f64; 3]) {
        let (a1, b) = (th[0], th[2]);
        let v = b * b + self.jump_var_rate;
        let e2 = (-2.0 * a1 * t).exp();
        let frac = (1.0 - e2) / (2.0 * a1);
        let dfrac = (2.0 * t * e2) / (2.0 * a1) - (1.0 - e2) / (2.0 * a1 * a1);
        (v * frac, [v * dfrac, 0.0, 2.0 * b * frac])
    }
}

impl EstimatingFunction for OuExactEf {
    fn name(&self) -> &str {
        "ou_exact_martingale"
    }
    fn dim(&self) -> usize {
        3
    }
    fn kappa0(&self) -> f64 {
        2.0
    }
    fn exact_martingale(&self) -> bool {
        true
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.jump_mean_rate);
        let (w, _) = ou_weights(x, th);
        let r = y - m.mu;
        out[0] = w[0] * r;
        out[1] = w[1] * r;
        out[2] = r * r - self.var(t, th).0;
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.jump_mean_rate);
        let (w, dw) = ou_weights(x, th);
        let r = y - m.mu;
        let (_, dv) = self.var(t, th);
        for j in 0..3 {
            out[j] = dw[0][j] * r - w[0] * m.dmu[j];
            out[3 + j] = dw[1][j] * r - w[1] * m.dmu[j];
            out[6 + j] = -2.0 * r * m.dmu[j] - dv[j];
        }
        Ok(())
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.jump_mean_rate);
        let (w, _) = ou_weights(x, th);
        out[0] = w[0];
        out[1] = w[1];
        out[2] = 2.0 * (y - m.mu);
        Ok(())
    }
    fn dy2(&self, _t: f64, _y: f64, _x: f64, _th: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&[0.0, 0.0, 2.0]);
        Ok(())
    }
    fn g1(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(0.0, x, th, self.jump_mean_rate);
        let (w, _) = ou_weights(x, th);
        out[0] = -w[0] * m.mu_dot0;
        out[1] = -w[1] * m.mu_dot0;
        out[2] = -2.0 * (y - x) * m.mu_dot0 - (th[2] * th[2] + self.jump_var_rate);
        Ok(())
    }
    fn g2(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<bool> {
        let m = ou_mean(0.0, x, th, self.jump_mean_rate);
        let (w, _) = ou_weights(x, th);
        let v = th[2] * th[2] + self.jump_var_rate;
        out[0] = -w[0] * m.mu_ddot0;
        out[1] = -w[1] * m.mu_ddot0;
        out[2] = 2.0 * m.mu_dot0 * m.mu_dot0 - 2.0 * (y - x) * m.mu_ddot0 + 2.0 * th[0] * v;
        Ok(true)
    }
}

/// Rate-optimal estimating function for the OU model with jumps on the
/// lattice `{−s, +s}`.
///
/// The α rows are exact-mean martingale rows with weight `∂α a / β²`. The β
/// row is `h(y − μ_t(x)) − t β² − ½ t² κ2` with
/// `h(w) = w² Π_{j=1..4} (1 − w²/(js)²)²`, a filter that vanishes together
/// with its first derivative at every nonzero multiple of `s` up to `4s`, so
/// the β row and its `y`-slope vanish on the points reachable by one to four
/// jumps. `κ2` is the second-order generator coefficient of `h`, which does
/// not depend on `x`.
pub struct LatticeEf {
    rate: f64,
    jump_mean: f64,
    filter: LatticeFilter,
    h4_at_0: f64,
    h2_at_s: f64,
}

/// `h(w) = w² Π_{j=1..4} (1 − w²/(js)²)²` evaluated in product form with
/// truncated Taylor arithmetic, so zeros at the lattice points are exact.
#[derive(Debug, Clone, Copy)]
pub struct LatticeFilter {
    pub spacing: f64,
}

fn taylor_mul(a: &[f64; 5], b: &[f64; 5]) -> [f64; 5] {
    let mut out = [0.0; 5];
    for i in 0..5 {
        for j in 0..5 - i {
            out[i + j] += a[i] * b[j];
        }
    }
    out
}

impl LatticeFilter {
    /// `h` and its first four derivatives at `w`.
    pub fn derivatives(&self, w: f64) -> [f64; 5] {
        let mut p = [1.0, 0.0, 0.0, 0.0, 0.0];
        for j in 1..=4 {
            let c = (j as f64 * self.spacing).powi(2);
            let f = [1.0 - w * w / c, -2.0 * w / c, -1.0 / c, 0.0, 0.0];
            p = taylor_mul(&p, &f);
        }
        let w2 = [w * w, 2.0 * w, 1.0, 0.0, 0.0];
        let h = taylor_mul(&w2, &taylor_mul(&p, &p));
        [h[0], h[1], 2.0 * h[2], 6.0 * h[3], 24.0 * h[4]]
    }

    pub fn value(&self, w: f64) -> f64 {
        self.derivatives(w)[0]
    }
}

pub fn make_rate_optimal_lattice_ef(model: &JumpDiffusionModel, jumps: &JumpLaw) -> Result<LatticeEf> {
    require_ou(model)?;
    let (s, rate, jump_mean) = match jumps {
        JumpLaw::Atoms { atoms, probs, rate } if atoms.len() == 2 && (atoms[0] + atoms[1]).abs() < 1e-12 && atoms[0] != 0.0 => {
            let s = atoms[0].abs();
            (s, *rate, atoms[0] * probs[0] + atoms[1] * probs[1])
        }
        _ => return Err(Error::Invalid("the lattice EF needs a two-atom jump law {−s, +s}".into())),
    };
    let filter = LatticeFilter { spacing: s };
    let h4_at_0 = filter.derivatives(0.0)[4];
    let h2_at_s = filter.derivatives(s)[2];
    Ok(LatticeEf { rate, jump_mean, filter, h4_at_0, h2_at_s })
}

impl LatticeEf {
    fn kappa2(&self, th: &[f64]) -> (f64, [f64; 3]) {
        let (a1, b) = (th[0], th[2]);
        let b2 = b * b;
        let xi = self.rate;
        let k = 2.0 * (xi * self.jump_mean).powi(2) - 2.0 * a1 * b2 + 0.25 * b2 * b2 * self.h4_at_0 + xi * b2 * (self.h2_at_s - 2.0);
        let dk = [-2.0 * b2, 0.0, -4.0 * a1 * b + b2 * b * self.h4_at_0 + 2.0 * xi * b * (self.h2_at_s - 2.0)];
        (k, dk)
    }

    fn mean_rate(&self) -> f64 {
        self.rate * self.jump_mean
    }

    pub fn filter(&self) -> LatticeFilter {
        self.filter
    }
}

impl EstimatingFunction for LatticeEf {
    fn name(&self) -> &str {
        "rate_optimal_lattice"
    }
    fn dim(&self) -> usize {
        3
    }
    fn kappa0(&self) -> f64 {
        3.0
    }
    fn coord_split(&self) -> Option<CoordSplit> {
        Some(CoordSplit { alpha: vec![0, 1], beta: 2 })
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.mean_rate());
        let (w, _) = ou_weights(x, th);
        let r = y - m.mu;
        let (k2, _) = self.kappa2(th);
        out[0] = w[0] * r;
        out[1] = w[1] * r;
        out[2] = self.filter.value(r) - t * th[2] * th[2] - 0.5 * t * t * k2;
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.mean_rate());
        let (w, dw) = ou_weights(x, th);
        let r = y - m.mu;
        let (_, dk) = self.kappa2(th);
        let hp = self.filter.derivatives(r)[1];
        let db2 = [0.0, 0.0, 2.0 * th[2]];
        for j in 0..3 {
            out[j] = dw[0][j] * r - w[0] * m.dmu[j];
            out[3 + j] = dw[1][j] * r - w[1] * m.dmu[j];
            out[6 + j] = -hp * m.dmu[j] - t * db2[j] - 0.5 * t * t * dk[j];
        }
        Ok(())
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.mean_rate());
        let (w, _) = ou_weights(x, th);
        out[0] = w[0];
        out[1] = w[1];
        out[2] = self.filter.derivatives(y - m.mu)[1];
        Ok(())
    }
    fn dy2(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(t, x, th, self.mean_rate());
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.filter.derivatives(y - m.mu)[2];
        Ok(())
    }
    fn g1(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let m = ou_mean(0.0, x, th, self.mean_rate());
        let (w, _) = ou_weights(x, th);
        out[0] = -w[0] * m.mu_dot0;
        out[1] = -w[1] * m.mu_dot0;
        out[2] = -self.filter.derivatives(y - x)[1] * m.mu_dot0 - th[2] * th[2];
        Ok(())
    }
    fn g2(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<bool> {
        let m = ou_mean(0.0, x, th, self.mean_rate());
        let (w, _) = ou_weights(x, th);
        let (k2, _) = self.kappa2(th);
        out[0] = -w[0] * m.mu_ddot0;
        out[1] = -w[1] * m.mu_ddot0;
        let h = self.filter.derivatives(y - x);
        out[2] = h[2] * m.mu_dot0 * m.mu_dot0 - h[1] * m.mu_ddot0 - k2;
        Ok(true)
    }
}

/// `M g` for a fixed invertible matrix `M`; produces the same estimator.
pub struct TransformedEf {
    inner: Arc<dyn EstimatingFunction>,
    m: DMatrix<f64>,
    name: String,
}

pub fn transform_ef(inner: Arc<dyn EstimatingFunction>, m: DMatrix<f64>) -> Result<TransformedEf> {
    let d = inner.dim();
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::DimensionMismatch(format!("matrix is {}×{}, EF dimension is {d}", m.nrows(), m.ncols())));
    }
    let name = format!("{}_transformed", inner.name());
    Ok(TransformedEf { inner, m, name })
}

impl TransformedEf {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.inner.dim();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|k| self.m[(i, k)] * v[k]).sum();
        }
    }

    fn is_diagonal(&self) -> bool {
        let d = self.m.nrows();
        (0..d).all(|i| (0..d).all(|j| i == j || self.m[(i, j)] == 0.0))
    }
}

impl EstimatingFunction for TransformedEf {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn kappa0(&self) -> f64 {
        self.inner.kappa0()
    }
    fn exact_martingale(&self) -> bool {
        self.inner.exact_martingale()
    }
    fn coord_split(&self) -> Option<CoordSplit> {
        if self.is_diagonal() {
            self.inner.coord_split()
        } else {
            None
        }
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let mut v = vec![0.0; self.dim()];
        self.inner.value(t, y, x, th, &mut v)?;
        self.apply(&v, out);
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let k = th.len();
        let mut j = vec![0.0; d * k];
        self.inner.dtheta(t, y, x, th, &mut j)?;
        for i in 0..d {
            for c in 0..k {
                out[i * k + c] = (0..d).map(|r| self.m[(i, r)] * j[r * k + c]).sum();
            }
        }
        Ok(())
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let mut v = vec![0.0; self.dim()];
        self.inner.dy(t, y, x, th, &mut v)?;
        self.apply(&v, out);
        Ok(())
    }
    fn dy2(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let mut v = vec![0.0; self.dim()];
        self.inner.dy2(t, y, x, th, &mut v)?;
        self.apply(&v, out);
        Ok(())
    }
    fn g1(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let mut v = vec![0.0; self.dim()];
        self.inner.g1(y, x, th, &mut v)?;
        self.apply(&v, out);
        Ok(())
    }
    fn g2(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<bool> {
        let mut v = vec![0.0; self.dim()];
        if !self.inner.g2(y, x, th, &mut v)? {
            return Ok(false);
        }
        self.apply(&v, out);
        Ok(true)
    }
}

type EfClosure = Box<dyn Fn(f64, f64, f64, &[f64], &mut [f64]) + Send + Sync>;

/// Estimating function from a closure. Derivatives not supplied are taken by
/// finite differences (central in `y` and `θ`, one-sided in `t`).
pub struct FnEf {
    name: String,
    dim: usize,
    kappa0: f64,
    value: EfClosure,
    dy: Option<EfClosure>,
    dy2: Option<EfClosure>,
    split: Option<CoordSplit>,
}

impl FnEf {
    pub fn new(name: &str, dim: usize, value: impl Fn(f64, f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { name: name.to_string(), dim, kappa0: 2.0, value: Box::new(value), dy: None, dy2: None, split: None }
    }

    pub fn with_dy(mut self, f: impl Fn(f64, f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.dy = Some(Box::new(f));
        self
    }

    pub fn with_dy2(mut self, f: impl Fn(f64, f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.dy2 = Some(Box::new(f));
        self
    }

    pub fn with_kappa0(mut self, k: f64) -> Self {
        self.kappa0 = k;
        self
    }

    pub fn with_coord_split(mut self, split: CoordSplit) -> Self {
        self.split = Some(split);
        self
    }

    fn eval(&self, t: f64, y: f64, x: f64, th: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        (self.value)(t, y, x, th, &mut v);
        Ok(v)
    }
}

impl EstimatingFunction for FnEf {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn kappa0(&self) -> f64 {
        self.kappa0
    }
    fn coord_split(&self) -> Option<CoordSplit> {
        self.split.clone()
    }
    fn value(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        (self.value)(t, y, x, th, out);
        Ok(())
    }
    fn dtheta(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        fd_dtheta(self, t, y, x, th, out)
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(f) = &self.dy {
            f(t, y, x, th, out);
            return Ok(());
        }
        let h = f64::EPSILON.cbrt() * y.abs().max(1.0);
        let (up, dn) = (self.eval(t, y + h, x, th)?, self.eval(t, y - h, x, th)?);
        for i in 0..self.dim {
            out[i] = (up[i] - dn[i]) / (2.0 * h);
        }
        Ok(())
    }
    fn dy2(&self, t: f64, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(f) = &self.dy2 {
            f(t, y, x, th, out);
            return Ok(());
        }
        let h = 1e-4 * y.abs().max(1.0);
        let (up, mid, dn) = (self.eval(t, y + h, x, th)?, self.eval(t, y, x, th)?, self.eval(t, y - h, x, th)?);
        for i in 0..self.dim {
            out[i] = (up[i] - 2.0 * mid[i] + dn[i]) / (h * h);
        }
        Ok(())
    }
    fn g1(&self, y: f64, x: f64, th: &[f64], out: &mut [f64]) -> Result<()> {
        let h = 1e-5;
        let (f0, f1, f2) = (self.eval(0.0, y, x, th)?, self.eval(h, y, x, th)?, self.eval(2.0 * h, y, x, th)?);
        for i in 0..self.dim {
            out[i] = (-3.0 * f0[i] + 4.0 * f1[i] - f2[i]) / (2.0 * h);
        }
        Ok(())
    }
}

/// Built-in estimating functions selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfName {
    Quadratic,
    LinearDrift,
    /// Linear drift rows with the state weight `1 + x²` instead of `∂α a / b²`.
    LinearDriftGeneric,
    RateOptimalLattice,
    OuExactMartingale,
}

impl EfName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "linear_drift" => Ok(Self::LinearDrift),
            "linear_drift_generic" => Ok(Self::LinearDriftGeneric),
            "rate_optimal_lattice" => Ok(Self::RateOptimalLattice),
            "ou_exact_martingale" => Ok(Self::OuExactMartingale),
            other => Err(Error::Config(format!("unknown estimating function {other:?}"))),
        }
    }
}

/// Builds a named estimating function for a model. `jumps` is needed by the
/// OU-specific functions.
pub fn build_ef(name: EfName, model: &JumpDiffusionModel, jumps: Option<&JumpLaw>) -> Result<Arc<dyn EstimatingFunction>> {
    let need_jumps = || jumps.ok_or_else(|| Error::Config("this estimating function needs the model's jump law".into()));
    Ok(match name {
        EfName::Quadratic => Arc::new(make_quadratic_ef(model, None, None)?),
        EfName::LinearDrift => Arc::new(make_linear_drift_ef(model)?),
        EfName::LinearDriftGeneric => {
            let d1 = model.d1();
            let w = FnVectorWeight { len: d1, f: move |x: f64, _: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = 1.0 + x * x) };
            Arc::new(make_weighted_linear_drift_ef(model, Arc::new(w), "linear_drift_generic")?)
        }
        EfName::RateOptimalLattice => Arc::new(make_rate_optimal_lattice_ef(model, need_jumps()?)?),
        EfName::OuExactMartingale => Arc::new(make_ou_exact_ef(model, need_jumps()?)?),
    })
}

/// Settings for the Monte Carlo order check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderConfig {
    pub deltas: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    /// Reference interval Δ0 for substep scaling; defaults to the largest Δ.
    #[serde(default)]
    pub delta0: Option<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordSlope {
    pub slope: Option<f64>,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub deltas: Vec<f64>,
    pub substeps: Vec<usize>,
    /// Conditional mean estimates, one vector per Δ.
    pub means: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub norm_std_errors: Vec<f64>,
    pub slope: f64,
    pub slope_std_error: f64,
    pub coord_slopes: Vec<CoordSlope>,
    /// Largest ratio of MC error to the estimated norm.
    pub mc_relative_error: f64,
    pub mc_dominated: bool,
}

const ORDER_CHUNK: usize = 2048;

/// Estimates `‖E[g(Δ, X_Δ, x, θ) | X_0 = x]‖` by simulation for each Δ and
/// regresses its logarithm on `log Δ`. Sample `j` uses the stream
/// `splitmix(seed, j)` at every Δ, so the deltas share random numbers.
pub fn verify_martingale_order(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    theta: &[f64],
    x: f64,
    cfg: &OrderConfig,
    workers: usize,
) -> Result<OrderReport> {
    if cfg.deltas.len() < 3 {
        return Err(Error::Invalid("the order check needs at least three deltas".into()));
    }
    if cfg.deltas.windows(2).any(|w| !(w[1] < w[0])) || cfg.deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Invalid("deltas must be positive and strictly decreasing".into()));
    }
    if cfg.mc_samples < 2 {
        return Err(Error::Invalid("need at least two MC samples".into()));
    }
    model.param_box.check(theta)?;
    let d = ef.dim();
    let delta0 = cfg.delta0.unwrap_or(cfg.deltas[0]);
    let mut report = OrderReport {
        deltas: cfg.deltas.clone(),
        substeps: Vec::new(),
        means: Vec::new(),
        std_errors: Vec::new(),
        norms: Vec::new(),
        norm_std_errors: Vec::new(),
        slope: f64::NAN,
        slope_std_error: f64::NAN,
        coord_slopes: Vec::new(),
        mc_relative_error: 0.0,
        mc_dominated: false,
    };
    let chunks = cfg.mc_samples.div_ceil(ORDER_CHUNK);
    for &delta in &cfg.deltas {
        let substeps = ((cfg.substeps as f64) * delta0 / delta).ceil().max(1.0) as usize;
        let parts: Vec<Result<Vec<f64>>> = parallel::with_workers(workers, || {
            (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut acc = vec![0.0; 2 * d];
                    let mut g = vec![0.0; d];
                    for j in c * ORDER_CHUNK..((c + 1) * ORDER_CHUNK).min(cfg.mc_samples) {
                        let mut rng = rng::stream(rng::splitmix(cfg.seed, j as u64));
                        let y = simulate::simulate_transition(model, theta, x, delta, substeps, &mut rng)?;
                        ef.value(delta, y, x, theta, &mut g)?;
                        for i in 0..d {
                            acc[i] += g[i];
                            acc[d + i] += g[i] * g[i];
                        }
                    }
                    Ok(acc)
                })
                .collect()
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let sums = parallel::tree_reduce(parts);
        let nf = cfg.mc_samples as f64;
        let mean: Vec<f64> = (0..d).map(|i| sums[i] / nf).collect();
        let se: Vec<f64> = (0..d)
            .map(|i| (((sums[d + i] - nf * mean[i] * mean[i]) / (nf - 1.0)).max(0.0) / nf).sqrt())
            .collect();
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        let norm_se = if norm > 0.0 {
            (0..d).map(|i| (mean[i] / norm * se[i]).powi(2)).sum::<f64>().sqrt()
        } else {
            se.iter().map(|s| s * s).sum::<f64>().sqrt()
        };
        report.mc_relative_error = report.mc_relative_error.max(if norm > 0.0 { norm_se / norm } else { f64::INFINITY });
        report.substeps.push(substeps);
        report.means.push(mean);
        report.std_errors.push(se);
        report.norms.push(norm);
        report.norm_std_errors.push(norm_se);
    }
    report.mc_dominated = report.mc_relative_error > 0.1;
    let lx: Vec<f64> = cfg.deltas.iter().map(|d| d.ln()).collect();
    if report.norms.iter().all(|n| *n > 0.0) {
        let ly: Vec<f64> = report.norms.iter().map(|n| n.ln()).collect();
        let s = stats::ols_slope(&lx, &ly)?;
        report.slope = s.slope;
        report.slope_std_error = s.std_error;
    }
    for i in 0..d {
        let vals: Vec<f64> = report.means.iter().map(|m| m[i].abs()).collect();
        report.coord_slopes.push(if vals.iter().all(|v| *v > 0.0) {
            let ly: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
            let s = stats::ols_slope(&lx, &ly)?;
            CoordSlope { slope: Some(s.slope), std_error: Some(s.std_error) }
        } else {
            CoordSlope { slope: None, std_error: None }
        });
    }
    Ok(report)
}

/// `ℒ_λ g(0, ·, x, θ)(y)` for every coordinate of `g`.
pub fn generator_of_ef(
    ef: &dyn EstimatingFunction,
    model: &JumpDiffusionModel,
    y: f64,
    x: f64,
    theta: &[f64],
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let d = ef.dim();
    let mut f = vec![0.0; d];
    let mut dy = vec![0.0; d];
    let mut dy2 = vec![0.0; d];
    ef.value(0.0, y, x, theta, &mut f)?;
    ef.dy(0.0, y, x, theta, &mut dy)?;
    ef.dy2(0.0, y, x, theta, &mut dy2)?;
    let mut out = vec![0.0; d];
    let mut failure = None;
    apply_generator_with(
        model,
        lambda,
        y,
        &f,
        &dy,
        &dy2,
        &mut |yy, o| {
            if let Err(e) = ef.value(0.0, yy, x, theta, o) {
                failure.get_or_insert(e);
            }
        },
        &mut out,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    /// `max |g(0, x, x, θ)|`.
    pub max_g0: f64,
    pub argmax_g0: (f64, Vec<f64>),
    /// `max |g1(x, x, θ) + ℒ_θ g(0, ·, x, θ)(x)|`.
    pub max_g1: f64,
    pub argmax_g1: (f64, Vec<f64>),
    pub points: usize,
}

/// Residuals of `g(0,x,x,θ) = 0` and `g1(x,x,θ) = −ℒ_θ g(0,θ)(x,x)` over
/// the given `(x, θ)` points.
pub fn check_lemma_conseq(ef: &dyn EstimatingFunction, model: &JumpDiffusionModel, points: &[(f64, Vec<f64>)]) -> Result<LemmaReport> {
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let d = ef.dim();
    let mut rep = LemmaReport {
        max_g0: 0.0,
        argmax_g0: (points[0].0, points[0].1.clone()),
        max_g1: 0.0,
        argmax_g1: (points[0].0, points[0].1.clone()),
        points: points.len(),
    };
    let mut g = vec![0.0; d];
    let mut g1 = vec![0.0; d];
    for (x, th) in points {
        ef.value(0.0, *x, *x, th, &mut g)?;
        let r0 = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if r0 > rep.max_g0 {
            rep.max_g0 = r0;
            rep.argmax_g0 = (*x, th.clone());
        }
        ef.g1(*x, *x, th, &mut g1)?;
        let lg = generator_of_ef(ef, model, *x, *x, th, th)?;
        let r1 = g1.iter().zip(&lg).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        if r1 > rep.max_g1 {
            rep.max_g1 = r1;
            rep.argmax_g1 = (*x, th.clone());
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin_model, BuiltinModel, BuiltinName};
    use approx::assert_abs_diff_eq;

    fn lattice_model() -> (JumpDiffusionModel, JumpLaw) {
        let jumps = JumpLaw::Atoms { atoms: vec![-2.0, 2.0], probs: vec![0.5, 0.5], rate: 1.0 };
        (BuiltinModel::OuAdditiveJumps { jumps: jumps.clone() }.build().unwrap(), jumps)
    }

    fn check_jacobian(ef: &dyn EstimatingFunction, t: f64, y: f64, x: f64, th: &[f64]) {
        let d = ef.dim();
        let k = th.len();
        let mut a = vec![0.0; d * k];
        let mut b = vec![0.0; d * k];
        ef.dtheta(t, y, x, th, &mut a).unwrap();
        fd_dtheta(ef, t, y, x, th, &mut b).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn quadratic_rows_at_zero_time() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        let ef: Arc<dyn EstimatingFunction> = Arc::new(make_quadratic_ef(&m, None, None).unwrap());
        let th = [1.0, 0.5];
        let g = ef.g0(1.3, 0.4, &th).unwrap();
        assert_abs_diff_eq!(g[0], (-0.4 / 0.25) * 0.9, epsilon = 1e-12);
        assert_eq!(ef.g0(0.4, 0.4, &th).unwrap(), vec![0.0, 0.0]);
        check_jacobian(ef.as_ref(), 0.02, 1.3, 0.4, &th);
    }

    #[test]
    fn quadratic_rejects_wrong_layout() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        assert!(matches!(make_quadratic_ef(&m, None, None), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        let (m, jumps) = lattice_model();
        let th = [1.2, 0.3, 0.6];
        for name in [EfName::RateOptimalLattice, EfName::OuExactMartingale] {
            let ef = build_ef(name, &m, Some(&jumps)).unwrap();
            check_jacobian(ef.as_ref(), 0.05, 0.9, -0.4, &th);
        }
        let dj = make_builtin_model(BuiltinName::DriftjumpKnownDiffusion);
        let ef = build_ef(EfName::LinearDrift, &dj, None).unwrap();
        check_jacobian(ef.as_ref(), 0.05, 0.9, -0.4, &[0.3]);
    }

    #[test]
    fn time_expansion_matches() {
        let (m, jumps) = lattice_model();
        let th = [1.2, 0.3, 0.6];
        for name in [EfName::RateOptimalLattice, EfName::OuExactMartingale] {
            let ef = build_ef(name, &m, Some(&jumps)).unwrap();
            let (y, x) = (0.7, -0.2);
            let g0 = ef.g0(y, x, &th).unwrap();
            let g1 = ef.g1_vec(y, x, &th).unwrap();
            let g2 = ef.g2_vec(y, x, &th).unwrap().unwrap();
            for t in [1e-2, 1e-3] {
                let g = ef.g(t, y, x, &th).unwrap();
                for i in 0..3 {
                    let rem = (g[i] - g0[i] - t * g1[i] - 0.5 * t * t * g2[i]).abs();
                    assert!(rem <= 10.0 * t.powi(3), "{name:?} row {i}: {rem}");
                }
            }
        }
    }

    #[test]
    fn lattice_filter_vanishes_on_multiples() {
        let (m, jumps) = lattice_model();
        let ef = make_rate_optimal_lattice_ef(&m, &jumps).unwrap();
        for k in 1..=4 {
            let w = 2.0 * k as f64;
            assert_eq!(ef.filter().derivatives(w)[0], 0.0);
            assert_eq!(ef.filter().derivatives(-w)[1], 0.0);
        }
    }

    #[test]
    fn filter_derivatives_by_hand() {
        // Taylor coefficients against the expanded polynomial.
        let f = LatticeFilter { spacing: 2.0 };
        let mut h = crate::generator::Polynomial::monomial(2);
        for j in 1..=4 {
            let g = crate::generator::Polynomial::new(vec![1.0, 0.0, -1.0 / (2.0 * j as f64).powi(2)]);
            h = h.mul(&g.mul(&g));
        }
        let mut p = h.clone();
        for k in 0..5 {
            for w in [0.0, 0.7, -1.3, 2.5] {
                let a = f.derivatives(w)[k];
                assert!((a - p.value(w)).abs() <= 1e-10 * (1.0 + a.abs()), "k={k} w={w}");
            }
            p = p.derivative();
        }
        assert_abs_diff_eq!(f.derivatives(0.0)[4], -17.083333333333332, epsilon = 1e-9);
        assert_abs_diff_eq!(f.derivatives(2.0)[2], 3.125, epsilon = 1e-9);
    }

    #[test]
    fn scaling_preserves_identities() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        let base: Arc<dyn EstimatingFunction> = Arc::new(make_quadratic_ef(&m, None, None).unwrap());
        let scaled = transform_ef(base, DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 5.0])).unwrap();
        let pts: Vec<(f64, Vec<f64>)> = (0..5).map(|i| (i as f64 - 2.0, vec![1.0, 0.5])).collect();
        let rep = check_lemma_conseq(&scaled, &m, &pts).unwrap();
        assert!(rep.max_g0 == 0.0 && rep.max_g1 < 1e-8);
    }
}
