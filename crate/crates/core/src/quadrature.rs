//! Integration against the Lévy measure.
//!
//! Gaussian jump laws use 64-point Gauss–Hermite. Other Lebesgue densities go
//! through adaptive Gauss–Kronrod (7/15) on either a truncated interval picked
//! from a moment bound or the whole line after the substitution
//! `z = t / (1 - t²)`. Atom laws are summed exactly.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub tol: f64,
    pub max_refine: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_refine: 200 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("quadrature.tol must lie in (0,1), got {}", self.tol)));
        }
        if self.max_refine == 0 || self.max_refine > 100_000 {
            return Err(Error::Config(format!(
                "quadrature.max_refine must lie in [1, 100000], got {}",
                self.max_refine
            )));
        }
        Ok(())
    }
}

/// A value together with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Physicists' Gauss–Hermite rule: `∫ f(x) e^{-x²} dx ≈ Σ w_i f(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal Hermite recurrence.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gh64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(64))
}

fn gh32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(32))
}

/// Nodes and weights for `E h(Z)` with `Z ~ N(mean, sd²)`.
pub fn gaussian_nodes(mean: f64, sd: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gh64();
    let s = std::f64::consts::SQRT_2 * sd;
    let norm = std::f64::consts::PI.sqrt();
    (x.iter().map(|xi| mean + s * xi).collect(), w.iter().map(|wi| wi / norm).collect())
}

/// `E h(Z)` for Gaussian `Z` with an error estimate from a 32-point companion rule.
pub fn gaussian_expectation(h: &dyn Fn(f64) -> f64, mean: f64, sd: f64) -> Estimate {
    let norm = std::f64::consts::PI.sqrt();
    let s = std::f64::consts::SQRT_2 * sd;
    let eval = |rule: &(Vec<f64>, Vec<f64>)| -> f64 {
        rule.0.iter().zip(&rule.1).map(|(x, w)| w * h(mean + s * x)).sum::<f64>() / norm
    };
    let hi = eval(gh64());
    let lo = eval(gh32());
    Estimate { value: hi, error: (hi - lo).abs() }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Segment {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    Segment { a, b, value: k * h, error: ((k - g) * h).abs() }
}

fn gk15_nodes(a: f64, b: f64, out: &mut Vec<(f64, f64)>) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    out.push((c, WGK[7] * h));
    for j in 0..7 {
        let dx = h * XGK[j];
        out.push((c - dx, WGK[j] * h));
        out.push((c + dx, WGK[j] * h));
    }
}

/// Adaptive bisection driven by the largest local error. Returns the final
/// partition along with the estimate.
fn adaptive_segments(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> (Vec<Segment>, Estimate, bool) {
    let mut segs = vec![gk15(f, a, b)];
    loop {
        let value: f64 = segs.iter().map(|s| s.value).sum();
        let error: f64 = segs.iter().map(|s| s.error).sum();
        let target = cfg.tol * value.abs().max(1.0);
        if error <= target {
            return (segs, Estimate { value, error }, true);
        }
        if segs.len() >= cfg.max_refine {
            return (segs, Estimate { value, error }, false);
        }
        let (worst, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("non-empty partition");
        let s = segs.swap_remove(worst);
        let m = 0.5 * (s.a + s.b);
        segs.push(gk15(f, s.a, m));
        segs.push(gk15(f, m, s.b));
    }
}

/// Adaptive Gauss–Kronrod on a finite interval.
pub fn integrate_interval(f: &dyn Fn(f64) -> f64, a: f64, b: f64, cfg: &QuadratureConfig) -> Result<Estimate> {
    let (_, est, ok) = adaptive_segments(f, a, b, cfg);
    if ok {
        Ok(est)
    } else {
        Err(Error::QuadratureFailure { partial: est.value, error: est.error })
    }
}

fn whole_line(f: &dyn Fn(f64) -> f64) -> impl Fn(f64) -> f64 + '_ {
    move |t: f64| {
        let d = 1.0 - t * t;
        let z = t / d;
        let jac = (1.0 + t * t) / (d * d);
        let v = f(z) * jac;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }
}

/// Adaptive integration over the whole real line.
pub fn integrate_real_line(f: &dyn Fn(f64) -> f64, cfg: &QuadratureConfig) -> Result<Estimate> {
    let g = whole_line(f);
    integrate_interval(&g, -1.0, 1.0, cfg)
}

/// Fixed node set for `∫ h dν ≈ Σ w_i h(z_i)`; weights already carry the total
/// rate and the density.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyNodes {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub error: f64,
}

impl LevyNodes {
    pub fn integrate(&self, h: impl Fn(f64) -> f64) -> f64 {
        self.z.iter().zip(&self.w).map(|(&z, &w)| w * h(z)).sum()
    }

    pub fn empty() -> Self {
        Self { z: Vec::new(), w: Vec::new(), error: 0.0 }
    }
}

/// Builds nodes for a Lebesgue density with no Gaussian form. The partition is
/// adapted to `q(z)(1+z²)²` so that polynomial integrands up to degree four are
/// resolved.
pub fn lebesgue_nodes(
    q: &dyn Fn(f64) -> f64,
    half_width: Option<f64>,
    cfg: &QuadratureConfig,
) -> Result<LevyNodes> {
    let weighted = |z: f64| {
        let s = 1.0 + z * z;
        q(z) * s * s
    };
    let mut pairs = Vec::new();
    let est = match half_width {
        Some(l) => {
            let (segs, est, ok) = adaptive_segments(&weighted, -l, l, cfg);
            if !ok {
                return Err(Error::QuadratureFailure { partial: est.value, error: est.error });
            }
            for s in &segs {
                gk15_nodes(s.a, s.b, &mut pairs);
            }
            pairs.iter_mut().for_each(|(z, w)| *w *= q(*z));
            est
        }
        None => {
            let g = whole_line(&weighted);
            let (segs, est, ok) = adaptive_segments(&g, -1.0, 1.0, cfg);
            if !ok {
                return Err(Error::QuadratureFailure { partial: est.value, error: est.error });
            }
            let mut tnodes = Vec::new();
            for s in &segs {
                gk15_nodes(s.a, s.b, &mut tnodes);
            }
            for (t, w) in tnodes {
                let d = 1.0 - t * t;
                let z = t / d;
                let jac = (1.0 + t * t) / (d * d);
                let qz = q(z);
                if qz.is_finite() && qz > 0.0 {
                    pairs.push((z, w * jac * qz));
                }
            }
            est
        }
    };
    pairs.retain(|&(_, w)| w != 0.0);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (z, w) = pairs.into_iter().unzip();
    Ok(LevyNodes { z, w, error: est.error })
}

/// Half-width `L` with `P(|Z| > L) ≤ 1e-10` from a bound on `E|Z|^k`.
pub fn truncation_from_moment(k: u32, moment: f64) -> f64 {
    (moment / 1e-10).powf(1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_rule_integrates_moments() {
        let (x, w) = gauss_hermite(64);
        let pi = std::f64::consts::PI;
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_abs_diff_eq!(m0, pi.sqrt(), epsilon = 1e-13);
        assert_abs_diff_eq!(m2, pi.sqrt() / 2.0, epsilon = 1e-13);
    }

    #[test]
    fn gaussian_fourth_moment() {
        let e = gaussian_expectation(&|z| z.powi(4), 0.3, 0.5);
        let want = 0.3f64.powi(4) + 6.0 * 0.09 * 0.25 + 3.0 * 0.0625;
        assert_abs_diff_eq!(e.value, want, epsilon = 1e-12);
        assert!(e.error < 1e-10);
    }

    #[test]
    fn kronrod_on_interval() {
        let cfg = QuadratureConfig::default();
        let e = integrate_interval(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, &cfg).unwrap();
        assert_abs_diff_eq!(e.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn whole_line_laplace_density() {
        let cfg = QuadratureConfig::default();
        let e = integrate_real_line(&|z: f64| 0.5 * (-z.abs()).exp() * z * z, &cfg).unwrap();
        assert_abs_diff_eq!(e.value, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn refinement_cap_reports_partial_value() {
        let cfg = QuadratureConfig { tol: 1e-14, max_refine: 2 };
        let err = integrate_interval(&|x: f64| x.abs().sqrt(), -1.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::QuadratureFailure { .. }));
    }

    #[test]
    fn lebesgue_nodes_match_moments() {
        let cfg = QuadratureConfig::default();
        let q = |z: f64| 2.0 * 0.5 * (-z.abs()).exp();
        let nodes = lebesgue_nodes(&q, None, &cfg).unwrap();
        assert_abs_diff_eq!(nodes.integrate(|_| 1.0), 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(nodes.integrate(|z| z * z), 4.0, epsilon = 1e-7);
        let l = truncation_from_moment(4, 24.0);
        let nodes = lebesgue_nodes(&q, Some(l), &cfg).unwrap();
        assert_abs_diff_eq!(nodes.integrate(|_| 1.0), 2.0, epsilon = 1e-8);
    }
}
