//! Infinitesimal generator
//! `ℒ_λ f(y) = a(y,λ) ∂y f + ½ b²(y,λ) ∂²y f + ∫ (f(y + c(y,z,λ)) − f(y)) ν_λ(dz)`
//! acting on the `y` argument of `f(t, y, x, θ)`, its iterates, and the
//! truncated conditional-moment expansion `Σ Δ^i/i! ℒ^i f`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::JumpDiffusionModel;

/// Scalar function `f(t, y, x, θ)` with the partials the generator needs.
pub trait SmoothFunction: Send + Sync {
    fn eval(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> f64;
    fn dy(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Option<f64>;
    fn dy2(&self, t: f64, y: f64, x: f64, theta: &[f64]) -> Option<f64>;
    fn dt(&self, _t: f64, _y: f64, _x: f64, _theta: &[f64]) -> Option<f64> {
        None
    }
    fn dtheta(&self, _t: f64, _y: f64, _x: f64, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

type Scalar4 = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Closure-backed [`SmoothFunction`].
#[derive(Clone)]
pub struct FnSmooth {
    eval: Scalar4,
    dy: Option<Scalar4>,
    dy2: Option<Scalar4>,
}

impl FnSmooth {
    pub fn new(eval: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { eval: Arc::new(eval), dy: None, dy2: None }
    }

    pub fn with_dy(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dy = Some(Arc::new(f));
        self
    }

    pub fn with_dy2(mut self, f: impl Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dy2 = Some(Arc::new(f));
        self
    }
}

impl SmoothFunction for FnSmooth {
    fn eval(&self, t: f64, y: f64, x: f64, th: &[f64]) -> f64 {
        (self.eval)(t, y, x, th)
    }
    fn dy(&self, t: f64, y: f64, x: f64, th: &[f64]) -> Option<f64> {
        self.dy.as_ref().map(|f| f(t, y, x, th))
    }
    fn dy2(&self, t: f64, y: f64, x: f64, th: &[f64]) -> Option<f64> {
        self.dy2.as_ref().map(|f| f(t, y, x, th))
    }
}

/// Polynomial in `y` alone: `Σ c_k y^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    /// `y^k`.
    pub fn monomial(k: usize) -> Self {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Self { coeffs: c }
    }

    pub fn derivative(&self) -> Self {
        if self.coeffs.len() <= 1 {
            return Self { coeffs: vec![0.0] };
        }
        Self { coeffs: self.coeffs.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect() }
    }

    pub fn value(&self, y: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * y + c)
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut c = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Self { coeffs: c }
    }
}

impl SmoothFunction for Polynomial {
    fn eval(&self, _: f64, y: f64, _: f64, _: &[f64]) -> f64 {
        self.value(y)
    }
    fn dy(&self, _: f64, y: f64, _: f64, _: &[f64]) -> Option<f64> {
        Some(self.derivative().value(y))
    }
    fn dy2(&self, _: f64, y: f64, _: f64, _: &[f64]) -> Option<f64> {
        Some(self.derivative().derivative().value(y))
    }
    fn dt(&self, _: f64, _: f64, _: f64, _: &[f64]) -> Option<f64> {
        Some(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorResult {
    pub value: f64,
    pub quadrature_error_estimate: f64,
}

/// Vector-valued generator at `y`. `f_at(y', out)` fills `f(y')`; the first
/// and second `y`-partials at `y` are given in `dy` and `dy2`.
#[allow(clippy::too_many_arguments)]
pub fn apply_generator_with(
    model: &JumpDiffusionModel,
    lambda: &[f64],
    y: f64,
    f_at_y: &[f64],
    dy: &[f64],
    dy2: &[f64],
    f_at: &mut dyn FnMut(f64, &mut [f64]),
    out: &mut [f64],
) -> Result<f64> {
    let a = model.drift(y, lambda);
    let b = model.diffusion(y, lambda);
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NanCoefficient(format!("a={a}, b={b} at y={y}")));
    }
    let half_b2 = 0.5 * b * b;
    for i in 0..out.len() {
        out[i] = a * dy[i] + half_b2 * dy2[i];
    }
    let nodes = model.levy_nodes(lambda)?;
    if nodes.z.is_empty() {
        return Ok(0.0);
    }
    let mut buf = vec![0.0; out.len()];
    let mut abs_jump = 0.0;
    let mut total_w = 0.0;
    for (&z, &w) in nodes.z.iter().zip(&nodes.w) {
        let yj = y + model.jump(y, z, lambda);
        if !model.state_space.contains(yj) {
            return Err(Error::DomainExit { state: yj, context: format!("after a jump from y={y} with z={z}") });
        }
        f_at(yj, &mut buf);
        for i in 0..out.len() {
            let d = w * (buf[i] - f_at_y[i]);
            out[i] += d;
            abs_jump += d.abs();
        }
        total_w += w;
    }
    Ok(if total_w > 0.0 { nodes.error * abs_jump / total_w } else { 0.0 })
}

/// `ℒ_λ f(t, ·, x, θ_eval)(y)`.
pub fn apply_generator(
    f: &dyn SmoothFunction,
    t: f64,
    y: f64,
    x: f64,
    theta_eval: &[f64],
    lambda: &[f64],
    model: &JumpDiffusionModel,
) -> Result<GeneratorResult> {
    model.param_box.check(lambda)?;
    if !model.state_space.contains(y) {
        return Err(Error::DomainExit { state: y, context: "generator evaluation point".into() });
    }
    let fy = f.eval(t, y, x, theta_eval);
    let dy = f.dy(t, y, x, theta_eval).ok_or_else(|| Error::InsufficientSmoothness("∂y f missing".into()))?;
    let dy2 = f.dy2(t, y, x, theta_eval).ok_or_else(|| Error::InsufficientSmoothness("∂²y f missing".into()))?;
    let mut out = [0.0];
    let err = apply_generator_with(
        model,
        lambda,
        y,
        &[fy],
        &[dy],
        &[dy2],
        &mut |yy, o| o[0] = f.eval(t, yy, x, theta_eval),
        &mut out,
    )?;
    Ok(GeneratorResult { value: out[0], quadrature_error_estimate: err })
}

/// `ℒ_λ^k f(0, ·, x, θ_eval)(y)` for `k ∈ {0,1,2}`. The second iterate
/// differentiates the first by central differences with step
/// `1e-4·max(1,|y|)`.
pub fn iterate_generator(
    f: &dyn SmoothFunction,
    k: usize,
    y: f64,
    x: f64,
    theta_eval: &[f64],
    lambda: &[f64],
    model: &JumpDiffusionModel,
) -> Result<f64> {
    match k {
        0 => Ok(f.eval(0.0, y, x, theta_eval)),
        1 => apply_generator(f, 0.0, y, x, theta_eval, lambda, model).map(|r| r.value),
        2 => {
            let lf = |yy: f64| apply_generator(f, 0.0, yy, x, theta_eval, lambda, model).map(|r| r.value);
            let h = 1e-4 * y.abs().max(1.0);
            let (lm, l0, lp) = (lf(y - h)?, lf(y)?, lf(y + h)?);
            let d1 = (lp - lm) / (2.0 * h);
            let d2 = (lp - 2.0 * l0 + lm) / (h * h);
            let mut out = [0.0];
            let mut failure = None;
            apply_generator_with(model, lambda, y, &[l0], &[d1], &[d2], &mut |yy, o| match lf(yy) {
                Ok(v) => o[0] = v,
                Err(e) => {
                    failure.get_or_insert(e);
                    o[0] = f64::NAN;
                }
            }, &mut out)?;
            match failure {
                Some(e) => Err(e),
                None => Ok(out[0]),
            }
        }
        _ => Err(Error::InsufficientSmoothness(format!("iterate order {k} not supported (max 2)"))),
    }
}

/// Truncated expansion `Σ_{i≤k} Δ^i/i! ℒ_λ^i f(x, x)` of
/// `E[f(X_{t+Δ}, X_t) | X_t = x]`, evaluated with θ = λ.
pub fn conditional_moment(
    f: &dyn SmoothFunction,
    x: f64,
    delta: f64,
    k: usize,
    lambda: &[f64],
    model: &JumpDiffusionModel,
) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::Invalid(format!("Δ must be nonnegative, got {delta}")));
    }
    let mut total = 0.0;
    let mut fact = 1.0;
    for i in 0..=k {
        if i > 0 {
            fact *= i as f64;
        }
        let term = iterate_generator(f, i, x, x, lambda, lambda, model)?;
        total += delta.powi(i as i32) / fact * term;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin_model, BuiltinName};
    use approx::assert_abs_diff_eq;

    fn ou() -> JumpDiffusionModel {
        make_builtin_model(BuiltinName::OuAdditiveJumps)
    }

    #[test]
    fn constants_are_annihilated() {
        let m = ou();
        let r = apply_generator(&Polynomial::new(vec![3.5]), 0.0, 0.7, 0.0, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &m).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn hand_evaluations() {
        let m = ou();
        let th = [1.0, 0.0, 1.0];
        let r = apply_generator(&Polynomial::monomial(1), 0.0, 2.0, 0.0, &th, &th, &m).unwrap();
        assert_abs_diff_eq!(r.value, -2.0, epsilon = 1e-8);
        let r = apply_generator(&Polynomial::monomial(2), 0.0, 1.0, 0.0, &th, &th, &m).unwrap();
        assert_abs_diff_eq!(r.value, -0.75, epsilon = 1e-7);
    }

    #[test]
    fn second_iterate_of_identity() {
        let m = ou();
        let th = [1.0, 0.0, 1.0];
        let v = iterate_generator(&Polynomial::monomial(1), 2, 2.0, 0.0, &th, &th, &m).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_step_expansion_is_identity() {
        let m = ou();
        let th = [1.0, 0.0, 1.0];
        let f = Polynomial::new(vec![0.3, -1.0, 2.0]);
        let v = conditional_moment(&f, 1.3, 0.0, 2, &th, &m).unwrap();
        assert_abs_diff_eq!(v, f.value(1.3), epsilon = 1e-14);
    }

    #[test]
    fn first_order_mean() {
        let m = ou();
        let v = conditional_moment(&Polynomial::monomial(1), 1.0, 0.01, 1, &[1.0, 0.0, 1.0], &m).unwrap();
        assert_abs_diff_eq!(v, 0.99, epsilon = 1e-12);
    }

    #[test]
    fn missing_derivatives_are_reported() {
        let m = ou();
        let f = FnSmooth::new(|_, y, _, _| y);
        let th = [1.0, 0.0, 1.0];
        let err = apply_generator(&f, 0.0, 1.0, 0.0, &th, &th, &m).unwrap_err();
        assert!(matches!(err, Error::InsufficientSmoothness(_)));
        assert!(iterate_generator(&Polynomial::monomial(1), 3, 1.0, 0.0, &th, &th, &m).is_err());
    }
}
