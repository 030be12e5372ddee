//! Jump-diffusion models `dX = a(X,θ) dt + b(X,θ) dW + ∫ c(X-,z,θ) N(dt,dz)`.
//!
//! Coefficient derivatives are taken with respect to the full parameter
//! vector θ = (α, β). Built-in models keep `a` and `c` free of β and `b` free
//! of α whenever the model allows it; the Example-style quadratic model lets
//! the jump size scale with β.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, Estimate, LevyNodes, QuadratureConfig};

/// θ split into the drift-jump block α and the diffusion block β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ParameterVector {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() && beta.is_empty() {
            return Err(Error::DimensionMismatch("parameter dimension must be at least 1".into()));
        }
        Ok(Self { alpha, beta })
    }

    pub fn from_slice(theta: &[f64], d1: usize) -> Result<Self> {
        if d1 > theta.len() {
            return Err(Error::DimensionMismatch(format!("d1={} exceeds d={}", d1, theta.len())));
        }
        Self::new(theta[..d1].to_vec(), theta[d1..].to_vec())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn d1(&self) -> usize {
        self.alpha.len()
    }

    pub fn d2(&self) -> usize {
        self.beta.len()
    }

    pub fn dim(&self) -> usize {
        self.d1() + self.d2()
    }
}

/// Open interval `(lower, upper)`; infinities allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub lower: f64,
    pub upper: f64,
}

impl StateSpace {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Invalid(format!("state space needs lower < upper, got ({lower}, {upper})")));
        }
        Ok(Self { lower, upper })
    }

    pub fn real_line() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lower && x < self.upper
    }
}

/// Open parameter box Θ = A × B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub d1: usize,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, d1: usize) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || d1 > lower.len() {
            return Err(Error::DimensionMismatch(format!(
                "box bounds of length {} and {} with d1={}",
                lower.len(),
                upper.len(),
                d1
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Invalid("parameter box needs finite bounds with lower < upper".into()));
        }
        Ok(Self { lower, upper, d1 })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn d2(&self) -> usize {
        self.dim() - self.d1
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| t > l && t < u)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("θ has length {}, model expects {}", theta.len(), self.dim())));
        }
        if !self.contains(theta) {
            return Err(Error::ParameterOutsideBox(theta.to_vec()));
        }
        Ok(())
    }

    /// Box with each side pulled in by `frac` of its width.
    pub fn shrink(&self, frac: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| {
                let w = u - l;
                (l + frac * w, u - frac * w)
            })
            .unzip();
        Self { lower, upper, d1: self.d1 }
    }

    /// Closed-box membership, used for the compact set K.
    pub fn contains_closed(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| t >= l && t <= u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }
}

/// One component of a Gaussian-mixture jump density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Dominating measure ν̃ of the jump density.
#[derive(Debug, Clone, PartialEq)]
pub enum Dominating {
    Lebesgue,
    Counting(Vec<f64>),
}

/// Finite-activity Lévy measure ν_θ(dz) = ξ(θ) p(z,θ) ν̃(dz).
pub trait LevyMeasure: Send + Sync + fmt::Debug {
    fn dominating(&self) -> Dominating;
    fn total_rate(&self, theta: &[f64]) -> f64;
    fn total_rate_dtheta(&self, theta: &[f64]) -> Vec<f64>;
    fn density(&self, z: f64, theta: &[f64]) -> f64;
    fn density_dtheta(&self, z: f64, theta: &[f64]) -> Vec<f64>;
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64;
    /// Bound on `E|Z|^k`, used to truncate Lebesgue quadrature.
    fn moment_hint(&self, _k: u32, _theta: &[f64]) -> Option<f64> {
        None
    }
    /// Mixture components when the density is a Gaussian mixture; selects
    /// Gauss–Hermite.
    fn gaussian_form(&self, _theta: &[f64]) -> Option<Vec<GaussianComponent>> {
        None
    }

    /// `q = ξ p`.
    fn intensity(&self, z: f64, theta: &[f64]) -> f64 {
        self.total_rate(theta) * self.density(z, theta)
    }

    /// `∂θ q = ∂θξ p + ξ ∂θ p`.
    fn intensity_dtheta(&self, z: f64, theta: &[f64]) -> Vec<f64> {
        let xi = self.total_rate(theta);
        let p = self.density(z, theta);
        let dxi = self.total_rate_dtheta(theta);
        let dp = self.density_dtheta(z, theta);
        dxi.iter().zip(&dp).map(|(a, b)| a * p + xi * b).collect()
    }
}

/// Builds the node set for `∫ h dν_θ`.
pub fn levy_nodes(levy: &dyn LevyMeasure, theta: &[f64], cfg: &QuadratureConfig) -> Result<LevyNodes> {
    let xi = levy.total_rate(theta);
    if !xi.is_finite() || xi < 0.0 {
        return Err(Error::NanCoefficient(format!("total jump rate {xi}")));
    }
    if xi == 0.0 {
        return Ok(LevyNodes::empty());
    }
    match levy.dominating() {
        Dominating::Counting(atoms) => {
            let w = atoms.iter().map(|&z| xi * levy.density(z, theta)).collect();
            Ok(LevyNodes { z: atoms, w, error: 0.0 })
        }
        Dominating::Lebesgue => {
            if let Some(comps) = levy.gaussian_form(theta) {
                let mut nodes = LevyNodes::empty();
                for c in comps {
                    let (z, w) = quadrature::gaussian_nodes(c.mean, c.sd);
                    nodes.z.extend(z);
                    nodes.w.extend(w.into_iter().map(|w| w * xi * c.weight));
                }
                return Ok(nodes);
            }
            let half = levy.moment_hint(4, theta).map(|m| quadrature::truncation_from_moment(4, m));
            let q = |z: f64| xi * levy.density(z, theta);
            quadrature::lebesgue_nodes(&q, half, cfg)
        }
    }
}

/// `∫ h(z) ν_θ(dz)` with an error estimate.
pub fn levy_integrate(
    h: &dyn Fn(f64) -> f64,
    theta: &[f64],
    levy: &dyn LevyMeasure,
    cfg: &QuadratureConfig,
) -> Result<Estimate> {
    let xi = levy.total_rate(theta);
    if xi == 0.0 {
        return Ok(Estimate { value: 0.0, error: 0.0 });
    }
    match levy.dominating() {
        Dominating::Counting(atoms) => Ok(Estimate {
            value: atoms.iter().map(|&z| xi * levy.density(z, theta) * h(z)).sum(),
            error: 0.0,
        }),
        Dominating::Lebesgue => {
            if let Some(comps) = levy.gaussian_form(theta) {
                let mut out = Estimate { value: 0.0, error: 0.0 };
                for c in comps {
                    let e = quadrature::gaussian_expectation(h, c.mean, c.sd);
                    out.value += xi * c.weight * e.value;
                    out.error += xi * c.weight * e.error;
                }
                return Ok(out);
            }
            let f = |z: f64| h(z) * levy.density(z, theta);
            let e = match levy.moment_hint(4, theta) {
                Some(m) => {
                    let l = quadrature::truncation_from_moment(4, m);
                    quadrature::integrate_interval(&f, -l, l, cfg)
                }
                None => quadrature::integrate_real_line(&f, cfg),
            };
            match e {
                Ok(e) => Ok(Estimate { value: xi * e.value, error: xi * e.error }),
                Err(Error::QuadratureFailure { partial, error }) => {
                    Err(Error::QuadratureFailure { partial: xi * partial, error: xi * error })
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Normal marks with a parameter-free law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianJumps {
    pub mean: f64,
    pub sd: f64,
    pub rate: f64,
    pub dim: usize,
}

impl LevyMeasure for GaussianJumps {
    fn dominating(&self) -> Dominating {
        Dominating::Lebesgue
    }
    fn total_rate(&self, _: &[f64]) -> f64 {
        self.rate
    }
    fn total_rate_dtheta(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn density(&self, z: f64, _: &[f64]) -> f64 {
        normal_pdf(z, self.mean, self.sd)
    }
    fn density_dtheta(&self, _: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn sample(&self, _: &[f64], rng: &mut dyn RngCore) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * e
    }
    fn moment_hint(&self, k: u32, _: &[f64]) -> Option<f64> {
        Some(gaussian_abs_moment_bound(self.mean, self.sd, k))
    }
    fn gaussian_form(&self, _: &[f64]) -> Option<Vec<GaussianComponent>> {
        Some(vec![GaussianComponent { weight: 1.0, mean: self.mean, sd: self.sd }])
    }
}

/// Finitely many atoms with fixed probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomJumps {
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
    pub rate: f64,
    pub dim: usize,
}

impl AtomJumps {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>, rate: f64, dim: usize) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != probs.len() {
            return Err(Error::Invalid("atoms and probs must be non-empty and of equal length".into()));
        }
        for i in 0..atoms.len() {
            for j in 0..i {
                if atoms[i] == atoms[j] {
                    return Err(Error::Invalid(format!("duplicate atom {}", atoms[i])));
                }
            }
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid("atom probabilities must be nonnegative and sum to 1".into()));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Invalid(format!("jump rate must be finite and nonnegative, got {rate}")));
        }
        Ok(Self { atoms, probs, rate, dim })
    }

    fn index_of(&self, z: f64) -> Option<usize> {
        self.atoms.iter().position(|&a| a == z)
    }
}

impl LevyMeasure for AtomJumps {
    fn dominating(&self) -> Dominating {
        Dominating::Counting(self.atoms.clone())
    }
    fn total_rate(&self, _: &[f64]) -> f64 {
        self.rate
    }
    fn total_rate_dtheta(&self, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn density(&self, z: f64, _: &[f64]) -> f64 {
        self.index_of(z).map_or(0.0, |i| self.probs[i])
    }
    fn density_dtheta(&self, _: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn sample(&self, _: &[f64], rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in self.atoms.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *a;
            }
        }
        *self.atoms.last().expect("non-empty atoms")
    }
}

/// Exponentially tilted Gaussian marks: `q(z,α) = ξ0 N(0,s²)(z) e^{αz}`, i.e.
/// rate `ξ0 e^{s²α²/2}` and marks `N(s²α, s²)`. The score is `∂α log q = z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedGaussianJumps {
    pub base_rate: f64,
    pub scale: f64,
    /// Position of α in θ.
    pub index: usize,
    pub dim: usize,
}

impl LevyMeasure for TiltedGaussianJumps {
    fn dominating(&self) -> Dominating {
        Dominating::Lebesgue
    }
    fn total_rate(&self, theta: &[f64]) -> f64 {
        let a = theta[self.index];
        self.base_rate * (0.5 * self.scale * self.scale * a * a).exp()
    }
    fn total_rate_dtheta(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        g[self.index] = self.total_rate(theta) * self.scale * self.scale * theta[self.index];
        g
    }
    fn density(&self, z: f64, theta: &[f64]) -> f64 {
        let s2 = self.scale * self.scale;
        normal_pdf(z, s2 * theta[self.index], self.scale)
    }
    fn density_dtheta(&self, z: f64, theta: &[f64]) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        let mut g = vec![0.0; self.dim];
        g[self.index] = self.density(z, theta) * (z - s2 * theta[self.index]);
        g
    }
    fn sample(&self, theta: &[f64], rng: &mut dyn RngCore) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.scale * self.scale * theta[self.index] + self.scale * e
    }
    fn moment_hint(&self, k: u32, theta: &[f64]) -> Option<f64> {
        Some(gaussian_abs_moment_bound(self.scale * self.scale * theta[self.index], self.scale, k))
    }
    fn gaussian_form(&self, theta: &[f64]) -> Option<Vec<GaussianComponent>> {
        Some(vec![GaussianComponent { weight: 1.0, mean: self.scale * self.scale * theta[self.index], sd: self.scale }])
    }
}

fn normal_pdf(z: f64, mean: f64, sd: f64) -> f64 {
    let u = (z - mean) / sd;
    (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

// Crude bound: E|Z|^k ≤ 2^{k-1}(|m|^k + s^k E|N|^k), with E|N|^4 = 3.
fn gaussian_abs_moment_bound(mean: f64, sd: f64, k: u32) -> f64 {
    let nk = match k {
        0 => 1.0,
        1 => (2.0 / std::f64::consts::PI).sqrt(),
        2 => 1.0,
        3 => 2.0 * (2.0 / std::f64::consts::PI).sqrt(),
        4 => 3.0,
        _ => (1..=k).step_by(2).map(|j| j as f64).product::<f64>().max(1.0) * 2.0,
    };
    2f64.powi(k as i32 - 1) * (mean.abs().powi(k as i32) + sd.powi(k as i32) * nk)
}

/// Instantaneous conditional mean and variance rates
/// `μ1 = a + ∫c dν`, `μ2 = b² + ∫c² dν`, with θ-gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRates {
    pub mean: f64,
    pub mean_dtheta: Vec<f64>,
    pub var: f64,
    pub var_dtheta: Vec<f64>,
}

/// Coefficient functions with analytic derivatives. All gradients are over
/// the full θ.
pub trait Coefficients: Send + Sync {
    fn drift(&self, x: f64, theta: &[f64]) -> f64;
    fn drift_dtheta(&self, x: f64, theta: &[f64]) -> Vec<f64>;
    fn drift_dx(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64;
    /// `∂θ b²`.
    fn diffusion_sq_dtheta(&self, x: f64, theta: &[f64]) -> Vec<f64>;
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion_dx2(&self, x: f64, theta: &[f64]) -> f64;
    fn jump(&self, x: f64, z: f64, theta: &[f64]) -> f64;
    fn jump_dtheta(&self, x: f64, z: f64, theta: &[f64]) -> Vec<f64>;
    fn jump_dx(&self, x: f64, z: f64, theta: &[f64]) -> f64;
    /// Closed-form moment rates when known.
    fn moment_rates(&self, _x: f64, _theta: &[f64]) -> Option<MomentRates> {
        None
    }
}

/// Plain coefficients without derivatives.
pub trait BasicCoefficients: Send + Sync {
    fn drift(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64;
    fn jump(&self, x: f64, z: f64, theta: &[f64]) -> f64;
}

/// Central finite-difference derivatives for user coefficients.
/// Step `h = cbrt(ε)·max(1,|v|)`.
pub struct FiniteDifference<C>(pub C);

fn fd_step(v: f64) -> f64 {
    f64::EPSILON.cbrt() * v.abs().max(1.0)
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let h = fd_step(theta[j]);
            t[j] = theta[j] + h;
            let up = f(&t);
            t[j] = theta[j] - h;
            let dn = f(&t);
            t[j] = theta[j];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

impl<C: BasicCoefficients> Coefficients for FiniteDifference<C> {
    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        self.0.drift(x, theta)
    }
    fn drift_dtheta(&self, x: f64, theta: &[f64]) -> Vec<f64> {
        fd_grad(|t| self.0.drift(x, t), theta)
    }
    fn drift_dx(&self, x: f64, theta: &[f64]) -> f64 {
        let h = fd_step(x);
        (self.0.drift(x + h, theta) - self.0.drift(x - h, theta)) / (2.0 * h)
    }
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        self.0.diffusion(x, theta)
    }
    fn diffusion_sq_dtheta(&self, x: f64, theta: &[f64]) -> Vec<f64> {
        fd_grad(|t| self.0.diffusion(x, t).powi(2), theta)
    }
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64 {
        let h = fd_step(x);
        (self.0.diffusion(x + h, theta) - self.0.diffusion(x - h, theta)) / (2.0 * h)
    }
    fn diffusion_dx2(&self, x: f64, theta: &[f64]) -> f64 {
        let h = f64::EPSILON.powf(0.25) * x.abs().max(1.0);
        (self.0.diffusion(x + h, theta) - 2.0 * self.0.diffusion(x, theta) + self.0.diffusion(x - h, theta)) / (h * h)
    }
    fn jump(&self, x: f64, z: f64, theta: &[f64]) -> f64 {
        self.0.jump(x, z, theta)
    }
    fn jump_dtheta(&self, x: f64, z: f64, theta: &[f64]) -> Vec<f64> {
        fd_grad(|t| self.0.jump(x, z, t), theta)
    }
    fn jump_dx(&self, x: f64, z: f64, theta: &[f64]) -> f64 {
        let h = fd_step(x);
        (self.0.jump(x + h, z, theta) - self.0.jump(x - h, z, theta)) / (2.0 * h)
    }
}

/// Support 𝒲(x) of the observed jump size `w = c(x,z,α)`.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpSupport {
    Interval(f64, f64),
    Points(Vec<f64>),
}

/// Density φ(x,w,α) of jump sizes with respect to η_x (Lebesgue or counting).
pub trait TransformedJumpDensity: Send + Sync {
    fn support(&self, x: f64, theta: &[f64]) -> JumpSupport;
    fn phi(&self, x: f64, w: f64, theta: &[f64]) -> f64;
    /// `∂α φ`, length d1.
    fn phi_dalpha(&self, x: f64, w: f64, theta: &[f64]) -> Vec<f64>;
    /// `(c⁻¹(x,w), ∂w c⁻¹)` in the Lebesgue case.
    fn inverse_jump(&self, x: f64, w: f64, theta: &[f64]) -> Option<(f64, f64)>;
}

/// φ for additive jumps `c(x,z,α) = z`: φ(x,w,α) = q(w,α).
#[derive(Debug, Clone)]
pub struct AdditiveTransform {
    pub levy: Arc<dyn LevyMeasure>,
    pub d1: usize,
}

impl TransformedJumpDensity for AdditiveTransform {
    fn support(&self, _x: f64, _theta: &[f64]) -> JumpSupport {
        match self.levy.dominating() {
            Dominating::Lebesgue => JumpSupport::Interval(f64::NEG_INFINITY, f64::INFINITY),
            Dominating::Counting(a) => JumpSupport::Points(a),
        }
    }
    fn phi(&self, _x: f64, w: f64, theta: &[f64]) -> f64 {
        self.levy.intensity(w, theta)
    }
    fn phi_dalpha(&self, _x: f64, w: f64, theta: &[f64]) -> Vec<f64> {
        let mut g = self.levy.intensity_dtheta(w, theta);
        g.truncate(self.d1);
        g
    }
    fn inverse_jump(&self, _x: f64, w: f64, _theta: &[f64]) -> Option<(f64, f64)> {
        match self.levy.dominating() {
            Dominating::Lebesgue => Some((w, 1.0)),
            Dominating::Counting(_) => None,
        }
    }
}

type NodeCache = Mutex<HashMap<Vec<u64>, Arc<LevyNodes>>>;

/// A complete model: coefficients, Lévy measure, spaces and optional φ.
#[derive(Clone)]
pub struct JumpDiffusionModel {
    pub name: String,
    pub state_space: StateSpace,
    pub param_box: ParamBox,
    pub coeffs: Arc<dyn Coefficients>,
    pub levy: Arc<dyn LevyMeasure>,
    pub transform: Option<Arc<dyn TransformedJumpDensity>>,
    pub quadrature: QuadratureConfig,
    cache: Arc<NodeCache>,
}

impl fmt::Debug for JumpDiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpDiffusionModel")
            .field("name", &self.name)
            .field("state_space", &self.state_space)
            .field("param_box", &self.param_box)
            .field("levy", &self.levy)
            .field("has_transform", &self.transform.is_some())
            .finish()
    }
}

impl JumpDiffusionModel {
    pub fn new(
        name: impl Into<String>,
        state_space: StateSpace,
        param_box: ParamBox,
        coeffs: Arc<dyn Coefficients>,
        levy: Arc<dyn LevyMeasure>,
        transform: Option<Arc<dyn TransformedJumpDensity>>,
    ) -> Self {
        Self {
            name: name.into(),
            state_space,
            param_box,
            coeffs,
            levy,
            transform,
            quadrature: QuadratureConfig::default(),
            cache: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn with_quadrature(mut self, cfg: QuadratureConfig) -> Self {
        self.quadrature = cfg;
        self.cache = Arc::new(Mutex::new(HashMap::new()));
        self
    }

    pub fn with_box(mut self, b: ParamBox) -> Result<Self> {
        if b.dim() != self.dim() || b.d1 != self.d1() {
            return Err(Error::DimensionMismatch("replacement box has a different layout".into()));
        }
        self.param_box = b;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.param_box.dim()
    }

    pub fn d1(&self) -> usize {
        self.param_box.d1
    }

    pub fn d2(&self) -> usize {
        self.param_box.d2()
    }

    pub fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        self.coeffs.drift(x, theta)
    }

    pub fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        self.coeffs.diffusion(x, theta)
    }

    pub fn jump(&self, x: f64, z: f64, theta: &[f64]) -> f64 {
        self.coeffs.jump(x, z, theta)
    }

    /// Cached quadrature nodes for ν_θ. The cache is keyed by the bit pattern
    /// of θ, so a hit returns exactly what a fresh build would.
    pub fn levy_nodes(&self, theta: &[f64]) -> Result<Arc<LevyNodes>> {
        let key: Vec<u64> = theta.iter().map(|t| t.to_bits()).collect();
        if let Some(n) = self.cache.lock().expect("node cache poisoned").get(&key) {
            return Ok(n.clone());
        }
        let nodes = Arc::new(levy_nodes(self.levy.as_ref(), theta, &self.quadrature)?);
        let mut cache = self.cache.lock().expect("node cache poisoned");
        if cache.len() >= 256 {
            cache.clear();
        }
        cache.insert(key, nodes.clone());
        Ok(nodes)
    }

    /// `μ1 = a + ∫c dν`, `μ2 = b² + ∫c² dν` and their θ-gradients.
    pub fn moment_rates(&self, x: f64, theta: &[f64]) -> Result<MomentRates> {
        if let Some(m) = self.coeffs.moment_rates(x, theta) {
            return Ok(m);
        }
        self.moment_rates_by_quadrature(x, theta)
    }

    /// Quadrature route for the moment rates, ignoring any closed form.
    pub fn moment_rates_by_quadrature(&self, x: f64, theta: &[f64]) -> Result<MomentRates> {
        let d = theta.len();
        let nodes = self.levy_nodes(theta)?;
        let a = self.coeffs.drift(x, theta);
        let b = self.coeffs.diffusion(x, theta);
        let mut mean = a;
        let mut var = b * b;
        let mut mean_dtheta = self.coeffs.drift_dtheta(x, theta);
        let mut var_dtheta = self.coeffs.diffusion_sq_dtheta(x, theta);
        for (&z, &w) in nodes.z.iter().zip(&nodes.w) {
            let c = self.coeffs.jump(x, z, theta);
            let dc = self.coeffs.jump_dtheta(x, z, theta);
            let q = self.levy.intensity(z, theta);
            let dq = self.levy.intensity_dtheta(z, theta);
            mean += w * c;
            var += w * c * c;
            for j in 0..d {
                let score = if q > 0.0 { dq[j] / q } else { 0.0 };
                mean_dtheta[j] += w * (dc[j] + c * score);
                var_dtheta[j] += w * (2.0 * c * dc[j] + c * c * score);
            }
        }
        Ok(MomentRates { mean, mean_dtheta, var, var_dtheta })
    }
}

/// Jump-size law used by the built-in models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpLaw {
    Gaussian { mean: f64, sd: f64, rate: f64 },
    Atoms { atoms: Vec<f64>, probs: Vec<f64>, rate: f64 },
}

impl JumpLaw {
    pub fn rate(&self) -> f64 {
        match self {
            JumpLaw::Gaussian { rate, .. } | JumpLaw::Atoms { rate, .. } => *rate,
        }
    }

    /// `E Z^k` of the mark distribution for k ≤ 4.
    pub fn raw_moment(&self, k: u32) -> f64 {
        match self {
            JumpLaw::Gaussian { mean, sd, .. } => {
                let (m, v) = (*mean, sd * sd);
                match k {
                    0 => 1.0,
                    1 => m,
                    2 => m * m + v,
                    3 => m.powi(3) + 3.0 * m * v,
                    4 => m.powi(4) + 6.0 * m * m * v + 3.0 * v * v,
                    _ => f64::NAN,
                }
            }
            JumpLaw::Atoms { atoms, probs, .. } => atoms.iter().zip(probs).map(|(a, p)| p * a.powi(k as i32)).sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            JumpLaw::Gaussian { sd, rate, mean } => {
                if !(sd.is_finite() && *sd > 0.0) || !(rate.is_finite() && *rate >= 0.0) || !mean.is_finite() {
                    return Err(Error::Invalid("gaussian jumps need finite mean, sd > 0 and rate ≥ 0".into()));
                }
                Ok(())
            }
            JumpLaw::Atoms { atoms, probs, rate } => AtomJumps::new(atoms.clone(), probs.clone(), *rate, 1).map(|_| ()),
        }
    }

    fn measure(&self, dim: usize) -> Result<Arc<dyn LevyMeasure>> {
        self.validate()?;
        Ok(match self {
            JumpLaw::Gaussian { mean, sd, rate } => Arc::new(GaussianJumps { mean: *mean, sd: *sd, rate: *rate, dim }),
            JumpLaw::Atoms { atoms, probs, rate } => Arc::new(AtomJumps::new(atoms.clone(), probs.clone(), *rate, dim)?),
        })
    }
}

/// Names of the built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinName {
    OuAdditiveJumps,
    QuadraticEfModel,
    DriftjumpKnownDiffusion,
}

impl BuiltinName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ou_additive_jumps" => Ok(Self::OuAdditiveJumps),
            "quadratic_ef_model" => Ok(Self::QuadraticEfModel),
            "driftjump_known_diffusion" => Ok(Self::DriftjumpKnownDiffusion),
            other => Err(Error::Config(format!("unknown model name {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::OuAdditiveJumps => "ou_additive_jumps",
            Self::QuadraticEfModel => "quadratic_ef_model",
            Self::DriftjumpKnownDiffusion => "driftjump_known_diffusion",
        }
    }
}

/// Built-in model with its tunable constants.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinModel {
    /// `dX = -α1(X-α2) dt + β dW + ∫ z N(dt,dz)`, θ = (α1, α2; β).
    OuAdditiveJumps { jumps: JumpLaw },
    /// `dX = ã dt + σβ dW + ∫ βz (N-μ)(dt,dz)`, ã = -α(X-m0), θ = (α; β),
    /// with σ² = 1 - ξ E Z².
    QuadraticEfModel { m0: f64, jumps: JumpLaw },
    /// `dX = (α - κX) dt + dW + ∫ z N^α(dt,dz)` with tilted Gaussian jumps.
    DriftjumpKnownDiffusion { kappa: f64, base_rate: f64, scale: f64 },
}

impl BuiltinModel {
    pub fn default_for(name: BuiltinName) -> Self {
        match name {
            BuiltinName::OuAdditiveJumps => Self::OuAdditiveJumps { jumps: JumpLaw::Gaussian { mean: 0.0, sd: 0.5, rate: 1.0 } },
            BuiltinName::QuadraticEfModel => {
                let tau = 1.8f64.sqrt();
                Self::QuadraticEfModel { m0: 0.0, jumps: JumpLaw::Atoms { atoms: vec![-tau, tau], probs: vec![0.5, 0.5], rate: 0.5 } }
            }
            BuiltinName::DriftjumpKnownDiffusion => Self::DriftjumpKnownDiffusion { kappa: 1.0, base_rate: 1.0, scale: 1.0 },
        }
    }

    pub fn build(&self) -> Result<JumpDiffusionModel> {
        match self {
            Self::OuAdditiveJumps { jumps } => {
                let levy = jumps.measure(3)?;
                let coeffs = OuCoefficients { rate: jumps.rate(), m1: jumps.raw_moment(1), m2: jumps.raw_moment(2) };
                let pbox = ParamBox::new(vec![0.05, -5.0, 0.01], vec![5.0, 5.0, 3.0], 2)?;
                let transform: Arc<dyn TransformedJumpDensity> = Arc::new(AdditiveTransform { levy: levy.clone(), d1: 2 });
                Ok(JumpDiffusionModel::new("ou_additive_jumps", StateSpace::real_line(), pbox, Arc::new(coeffs), levy, Some(transform)))
            }
            Self::QuadraticEfModel { m0, jumps } => {
                let levy = jumps.measure(2)?;
                let gamma2 = jumps.rate() * jumps.raw_moment(2);
                if !(gamma2 < 1.0) {
                    return Err(Error::Invalid(format!("jump second moment {gamma2} leaves no room for σ² = 1 - γ2 > 0")));
                }
                let coeffs = QuadraticCoefficients {
                    m0: *m0,
                    sigma: (1.0 - gamma2).sqrt(),
                    jump_mean_rate: jumps.rate() * jumps.raw_moment(1),
                };
                let pbox = ParamBox::new(vec![0.05, 0.01], vec![5.0, 3.0], 1)?;
                Ok(JumpDiffusionModel::new("quadratic_ef_model", StateSpace::real_line(), pbox, Arc::new(coeffs), levy, None))
            }
            Self::DriftjumpKnownDiffusion { kappa, base_rate, scale } => {
                if !(*kappa > 0.0 && *base_rate >= 0.0 && *scale > 0.0) {
                    return Err(Error::Invalid("driftjump model needs kappa > 0, base_rate ≥ 0, scale > 0".into()));
                }
                let levy: Arc<dyn LevyMeasure> = Arc::new(TiltedGaussianJumps { base_rate: *base_rate, scale: *scale, index: 0, dim: 1 });
                let coeffs = DriftJumpCoefficients { kappa: *kappa, base_rate: *base_rate, scale: *scale };
                let pbox = ParamBox::new(vec![-3.0], vec![3.0], 1)?;
                let transform: Arc<dyn TransformedJumpDensity> = Arc::new(AdditiveTransform { levy: levy.clone(), d1: 1 });
                Ok(JumpDiffusionModel::new("driftjump_known_diffusion", StateSpace::real_line(), pbox, Arc::new(coeffs), levy, Some(transform)))
            }
        }
    }
}

/// Built-in model with default constants.
pub fn make_builtin_model(name: BuiltinName) -> JumpDiffusionModel {
    BuiltinModel::default_for(name).build().expect("default built-in constants are valid")
}

#[derive(Debug, Clone)]
struct OuCoefficients {
    rate: f64,
    m1: f64,
    m2: f64,
}

impl Coefficients for OuCoefficients {
    fn drift(&self, x: f64, t: &[f64]) -> f64 {
        -t[0] * (x - t[1])
    }
    fn drift_dtheta(&self, x: f64, t: &[f64]) -> Vec<f64> {
        vec![-(x - t[1]), t[0], 0.0]
    }
    fn drift_dx(&self, _: f64, t: &[f64]) -> f64 {
        -t[0]
    }
    fn diffusion(&self, _: f64, t: &[f64]) -> f64 {
        t[2]
    }
    fn diffusion_sq_dtheta(&self, _: f64, t: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0, 2.0 * t[2]]
    }
    fn diffusion_dx(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn diffusion_dx2(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn jump(&self, _: f64, z: f64, _: &[f64]) -> f64 {
        z
    }
    fn jump_dtheta(&self, _: f64, _: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0; 3]
    }
    fn jump_dx(&self, _: f64, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn moment_rates(&self, x: f64, t: &[f64]) -> Option<MomentRates> {
        Some(MomentRates {
            mean: -t[0] * (x - t[1]) + self.rate * self.m1,
            mean_dtheta: vec![-(x - t[1]), t[0], 0.0],
            var: t[2] * t[2] + self.rate * self.m2,
            var_dtheta: vec![0.0, 0.0, 2.0 * t[2]],
        })
    }
}

#[derive(Debug, Clone)]
struct QuadraticCoefficients {
    m0: f64,
    sigma: f64,
    /// ξ E Z, compensated in the drift.
    jump_mean_rate: f64,
}

impl Coefficients for QuadraticCoefficients {
    fn drift(&self, x: f64, t: &[f64]) -> f64 {
        -t[0] * (x - self.m0) - t[1] * self.jump_mean_rate
    }
    fn drift_dtheta(&self, x: f64, _: &[f64]) -> Vec<f64> {
        vec![-(x - self.m0), -self.jump_mean_rate]
    }
    fn drift_dx(&self, _: f64, t: &[f64]) -> f64 {
        -t[0]
    }
    fn diffusion(&self, _: f64, t: &[f64]) -> f64 {
        self.sigma * t[1]
    }
    fn diffusion_sq_dtheta(&self, _: f64, t: &[f64]) -> Vec<f64> {
        vec![0.0, 2.0 * self.sigma * self.sigma * t[1]]
    }
    fn diffusion_dx(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn diffusion_dx2(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn jump(&self, _: f64, z: f64, t: &[f64]) -> f64 {
        t[1] * z
    }
    fn jump_dtheta(&self, _: f64, z: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0, z]
    }
    fn jump_dx(&self, _: f64, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn moment_rates(&self, x: f64, t: &[f64]) -> Option<MomentRates> {
        // ã and b̃² = β² thanks to σ² + γ2 = 1.
        Some(MomentRates {
            mean: -t[0] * (x - self.m0),
            mean_dtheta: vec![-(x - self.m0), 0.0],
            var: t[1] * t[1],
            var_dtheta: vec![0.0, 2.0 * t[1]],
        })
    }
}

#[derive(Debug, Clone)]
struct DriftJumpCoefficients {
    kappa: f64,
    base_rate: f64,
    scale: f64,
}

impl Coefficients for DriftJumpCoefficients {
    fn drift(&self, x: f64, t: &[f64]) -> f64 {
        t[0] - self.kappa * x
    }
    fn drift_dtheta(&self, _: f64, _: &[f64]) -> Vec<f64> {
        vec![1.0]
    }
    fn drift_dx(&self, _: f64, _: &[f64]) -> f64 {
        -self.kappa
    }
    fn diffusion(&self, _: f64, _: &[f64]) -> f64 {
        1.0
    }
    fn diffusion_sq_dtheta(&self, _: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn diffusion_dx(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn diffusion_dx2(&self, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn jump(&self, _: f64, z: f64, _: &[f64]) -> f64 {
        z
    }
    fn jump_dtheta(&self, _: f64, _: f64, _: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn jump_dx(&self, _: f64, _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn moment_rates(&self, x: f64, t: &[f64]) -> Option<MomentRates> {
        let a = t[0];
        let s2 = self.scale * self.scale;
        let xi = self.base_rate * (0.5 * s2 * a * a).exp();
        let dxi = xi * s2 * a;
        let m1 = s2 * a;
        let m2 = s2 * s2 * a * a + s2;
        Some(MomentRates {
            mean: a - self.kappa * x + xi * m1,
            mean_dtheta: vec![1.0 + dxi * m1 + xi * s2],
            var: 1.0 + xi * m2,
            var_dtheta: vec![dxi * m2 + xi * 2.0 * s2 * s2 * a],
        })
    }
}

/// Outcome of one sampled contract check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    /// Smallest margin (for positivity) or largest quotient (for Lipschitz).
    pub worst: f64,
    pub at_x: f64,
    pub at_theta: Vec<f64>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Spot checks of the model contract on a grid: `b² > 0`, sampled Lipschitz
/// quotients of `a` and `b`, and closure of 𝒳 under jumps at quadrature nodes.
/// Quotients above `lipschitz_cap` are reported as violations.
pub fn validate_model(model: &JumpDiffusionModel, grid: &[f64], thetas: &[Vec<f64>]) -> Result<ValidationReport> {
    validate_model_with_cap(model, grid, thetas, 1e6)
}

pub fn validate_model_with_cap(
    model: &JumpDiffusionModel,
    grid: &[f64],
    thetas: &[Vec<f64>],
    lipschitz_cap: f64,
) -> Result<ValidationReport> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    for &x in grid {
        if !model.state_space.contains(x) {
            return Err(Error::Invalid(format!("grid point {x} outside the state space")));
        }
    }
    for t in thetas {
        model.param_box.check(t)?;
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut violations = Vec::new();
    let mut pos = ValidationCheck { name: "b2_positive".into(), worst: f64::INFINITY, at_x: f64::NAN, at_theta: vec![], violations: 0 };
    let mut lip_a = ValidationCheck { name: "lipschitz_drift".into(), worst: 0.0, at_x: f64::NAN, at_theta: vec![], violations: 0 };
    let mut lip_b = ValidationCheck { name: "lipschitz_diffusion".into(), worst: 0.0, at_x: f64::NAN, at_theta: vec![], violations: 0 };
    let mut closure = ValidationCheck { name: "jump_closure".into(), worst: 0.0, at_x: f64::NAN, at_theta: vec![], violations: 0 };

    for t in thetas {
        let nodes = model.levy_nodes(t)?;
        let mut prev: Option<(f64, f64, f64)> = None;
        for &x in &sorted {
            let a = model.drift(x, t);
            let b = model.diffusion(x, t);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NanCoefficient(format!("a={a}, b={b} at x={x}, θ={t:?}")));
            }
            let b2 = b * b;
            if b2 < pos.worst {
                pos.worst = b2;
                pos.at_x = x;
                pos.at_theta = t.clone();
            }
            if !(b2 > 0.0) {
                pos.violations += 1;
                violations.push(format!("b² = {b2} at x={x}, θ={t:?}"));
            }
            if let Some((xp, ap, bp)) = prev {
                if x > xp {
                    for (chk, q) in [(&mut lip_a, (a - ap).abs() / (x - xp)), (&mut lip_b, (b - bp).abs() / (x - xp))] {
                        if q > chk.worst || !q.is_finite() {
                            chk.worst = q;
                            chk.at_x = x;
                            chk.at_theta = t.clone();
                        }
                        if !(q <= lipschitz_cap) {
                            chk.violations += 1;
                            violations.push(format!("{} quotient {q} between x={xp} and x={x}, θ={t:?}", chk.name));
                        }
                    }
                }
            }
            prev = Some((x, a, b));
            for &z in &nodes.z {
                let c = model.jump(x, z, t);
                if !c.is_finite() {
                    return Err(Error::NanCoefficient(format!("c={c} at x={x}, z={z}, θ={t:?}")));
                }
                if !model.state_space.contains(x + c) {
                    closure.violations += 1;
                    closure.worst = closure.worst.max(1.0);
                    closure.at_x = x;
                    closure.at_theta = t.clone();
                    violations.push(format!("jump from x={x} with z={z} leaves the state space"));
                }
            }
        }
    }
    Ok(ValidationReport { checks: vec![pos, lip_a, lip_b, closure], violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ou_drift_value() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        assert_eq!(m.drift(2.0, &[1.0, 0.0, 1.0]), -2.0);
    }

    #[test]
    fn quadratic_variance_rate_is_beta_squared() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        for x in [-3.0, 0.0, 1.7] {
            let r = m.moment_rates(x, &[1.0, 0.5]).unwrap();
            assert_abs_diff_eq!(r.var, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_density_normalises() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        let theta = [1.0, 0.0, 1.0];
        let e = levy_integrate(&|_| 1.0, &theta, m.levy.as_ref(), &m.quadrature).unwrap();
        assert_abs_diff_eq!(e.value, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn closed_form_moment_rates_match_quadrature() {
        for name in [BuiltinName::OuAdditiveJumps, BuiltinName::QuadraticEfModel, BuiltinName::DriftjumpKnownDiffusion] {
            let m = make_builtin_model(name);
            let theta = m.param_box.shrink(0.45).center();
            let theta: Vec<f64> = theta.iter().map(|t| t + 0.1).collect();
            for x in [-1.5, 0.3, 2.0] {
                let a = m.moment_rates(x, &theta).unwrap();
                let b = m.moment_rates_by_quadrature(x, &theta).unwrap();
                assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-10);
                assert_abs_diff_eq!(a.var, b.var, epsilon = 1e-10);
                for j in 0..theta.len() {
                    assert_abs_diff_eq!(a.mean_dtheta[j], b.mean_dtheta[j], epsilon = 1e-9);
                    assert_abs_diff_eq!(a.var_dtheta[j], b.var_dtheta[j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn box_rejects_boundary() {
        let m = make_builtin_model(BuiltinName::QuadraticEfModel);
        let err = validate_model(&m, &[0.0], &[vec![1.0, 0.01]]).unwrap_err();
        assert!(matches!(err, Error::ParameterOutsideBox(_)));
        assert!(err.to_string().contains("parameter outside open box"));
    }

    #[test]
    fn duplicate_atoms_rejected() {
        assert!(AtomJumps::new(vec![1.0, 1.0], vec![0.5, 0.5], 1.0, 1).is_err());
    }

    #[test]
    fn quadratic_sigma_respects_convention() {
        let bad = BuiltinModel::QuadraticEfModel { m0: 0.0, jumps: JumpLaw::Gaussian { mean: 0.0, sd: 2.0, rate: 1.0 } };
        assert!(bad.build().is_err());
    }
}
