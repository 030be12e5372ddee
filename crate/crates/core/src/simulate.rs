//! Sample paths by Euler–Maruyama between jumps with exact jump placement.
//!
//! Each path owns one random stream. Jump times and marks for the whole horizon
//! are drawn first, then Wiener increments in chronological order. A substep
//! that contains jumps is split at each jump time.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JumpDiffusionModel, ParameterVector};
use crate::parallel;
use crate::rng::{self, Stream};

/// Default cap Δ0 on the sampling interval.
pub const DELTA0: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme {
    pub n: usize,
    pub delta: f64,
}

impl SamplingScheme {
    pub fn new(n: usize, delta: f64) -> Result<Self> {
        Self::with_cap(n, delta, DELTA0)
    }

    pub fn with_cap(n: usize, delta: f64, cap: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid(format!("need n ≥ 2 observation intervals, got {n}")));
        }
        if !(delta > 0.0 && delta <= cap) {
            return Err(Error::Invalid(format!("Δ must lie in (0, {cap}], got {delta}")));
        }
        Ok(Self { n, delta })
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub time: f64,
    pub x_pre: f64,
    pub z: f64,
    pub jump: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPath {
    pub scheme: SamplingScheme,
    /// `X_0, …, X_n`.
    pub values: Vec<f64>,
    pub theta_true: Option<ParameterVector>,
    pub seed: u64,
    pub jump_log: Option<Vec<JumpRecord>>,
}

impl ObservationPath {
    /// Wraps observed data. Only `n ≥ 1` intervals are required here so that
    /// small hand-made paths can be evaluated.
    pub fn from_values(values: Vec<f64>, delta: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid("a path needs at least two observations".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Invalid(format!("Δ must be positive, got {delta}")));
        }
        let n = values.len() - 1;
        Ok(Self { scheme: SamplingScheme { n, delta }, values, theta_true: None, seed: 0, jump_log: None })
    }

    pub fn n(&self) -> usize {
        self.values.len() - 1
    }

    pub fn delta(&self) -> f64 {
        self.scheme.delta
    }
}

/// Where a path starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartPoint {
    Fixed { x0: f64 },
    /// Warm up from `x0` for `burn_in` time units on a stream derived from the
    /// path seed.
    Stationary { x0: f64, burn_in: f64 },
}

fn draw_jumps(model: &JumpDiffusionModel, theta: &[f64], horizon: f64, rng: &mut Stream) -> Result<Vec<(f64, f64)>> {
    let xi = model.levy.total_rate(theta);
    if !xi.is_finite() || xi < 0.0 {
        return Err(Error::NanCoefficient(format!("total jump rate {xi}")));
    }
    let mut out = Vec::new();
    if xi == 0.0 {
        return Ok(out);
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / xi;
        if t > horizon {
            break;
        }
        let z = model.levy.sample(theta, rng);
        out.push((t, z));
    }
    Ok(out)
}

#[inline]
fn euler(model: &JumpDiffusionModel, theta: &[f64], x: f64, dt: f64, rng: &mut Stream) -> Result<f64> {
    let e: f64 = StandardNormal.sample(rng);
    let a = model.drift(x, theta);
    let b = model.diffusion(x, theta);
    let nx = x + a * dt + b * dt.sqrt() * e;
    if !nx.is_finite() {
        return Err(Error::NanCoefficient(format!("a={a}, b={b} at x={x}")));
    }
    if !model.state_space.contains(nx) {
        return Err(Error::DomainExit { state: nx, context: "during an Euler step".into() });
    }
    Ok(nx)
}

/// Integrates over `n` intervals of length `delta`, recording observations
/// and jumps when requested. Returns the terminal state.
#[allow(clippy::too_many_arguments)]
fn integrate(
    model: &JumpDiffusionModel,
    theta: &[f64],
    x0: f64,
    n: usize,
    delta: f64,
    substeps: usize,
    rng: &mut Stream,
    mut values: Option<&mut Vec<f64>>,
    mut log: Option<&mut Vec<JumpRecord>>,
) -> Result<f64> {
    let horizon = n as f64 * delta;
    let jumps = draw_jumps(model, theta, horizon, rng)?;
    let h = delta / substeps as f64;
    let mut x = x0;
    let mut cur = 0.0;
    let mut next_jump = 0;
    if let Some(v) = values.as_deref_mut() {
        v.push(x0);
    }
    for i in 0..n {
        for s in 0..substeps {
            let end = if s + 1 == substeps { (i + 1) as f64 * delta } else { (i * substeps + s + 1) as f64 * h };
            while next_jump < jumps.len() && jumps[next_jump].0 <= end {
                let (tj, z) = jumps[next_jump];
                if tj > cur {
                    x = euler(model, theta, x, tj - cur, rng)?;
                    cur = tj;
                }
                let c = model.jump(x, z, theta);
                let nx = x + c;
                if !nx.is_finite() {
                    return Err(Error::NanCoefficient(format!("jump size {c} at x={x}, z={z}")));
                }
                if !model.state_space.contains(nx) {
                    return Err(Error::DomainExit { state: nx, context: format!("after a jump at t={tj} with z={z}") });
                }
                if let Some(l) = log.as_deref_mut() {
                    l.push(JumpRecord { time: tj, x_pre: x, z, jump: c });
                }
                x = nx;
                next_jump += 1;
            }
            if end > cur {
                x = euler(model, theta, x, end - cur, rng)?;
                cur = end;
            }
        }
        if let Some(v) = values.as_deref_mut() {
            v.push(x);
        }
    }
    Ok(x)
}

fn check_inputs(model: &JumpDiffusionModel, theta: &[f64], x0: f64, substeps: usize) -> Result<()> {
    model.param_box.check(theta)?;
    if !model.state_space.contains(x0) {
        return Err(Error::DomainExit { state: x0, context: "initial state".into() });
    }
    if substeps == 0 {
        return Err(Error::Invalid("substeps must be positive".into()));
    }
    Ok(())
}

/// Simulates one path observed on the scheme grid.
pub fn simulate_path(
    model: &JumpDiffusionModel,
    theta0: &[f64],
    scheme: SamplingScheme,
    x0: f64,
    substeps: usize,
    seed: u64,
) -> Result<ObservationPath> {
    check_inputs(model, theta0, x0, substeps)?;
    let mut rng = rng::stream(seed);
    let mut values = Vec::with_capacity(scheme.n + 1);
    let mut log = Vec::new();
    integrate(model, theta0, x0, scheme.n, scheme.delta, substeps, &mut rng, Some(&mut values), Some(&mut log))?;
    Ok(ObservationPath {
        scheme,
        values,
        theta_true: ParameterVector::from_slice(theta0, model.d1()).ok(),
        seed,
        jump_log: Some(log),
    })
}

/// Simulates from a [`StartPoint`]; the warm-up uses its own derived stream.
pub fn simulate_path_from(
    model: &JumpDiffusionModel,
    theta0: &[f64],
    scheme: SamplingScheme,
    start: StartPoint,
    substeps: usize,
    seed: u64,
) -> Result<ObservationPath> {
    let x0 = match start {
        StartPoint::Fixed { x0 } => x0,
        StartPoint::Stationary { x0, burn_in } => {
            stationary_warmup(model, theta0, x0, burn_in, substeps, rng::splitmix(seed, rng::WARMUP_TAG))?
        }
    };
    simulate_path(model, theta0, scheme, x0, substeps, seed)
}

/// Replication `r` uses seed `splitmix(base_seed, r)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_many(
    model: &JumpDiffusionModel,
    theta0: &[f64],
    scheme: SamplingScheme,
    start: StartPoint,
    substeps: usize,
    base_seed: u64,
    reps: usize,
    workers: usize,
) -> Vec<Result<ObservationPath>> {
    parallel::with_workers(workers, || {
        (0..reps)
            .into_par_iter()
            .map(|r| simulate_path_from(model, theta0, scheme, start, substeps, rng::splitmix(base_seed, r as u64)))
            .collect()
    })
}

/// Runs the process for `burn_in_time` and returns the terminal state, an
/// approximate draw from the invariant law. The run uses unit observation
/// intervals (shorter if the burn-in is shorter) with `substeps` each.
pub fn stationary_warmup(
    model: &JumpDiffusionModel,
    theta0: &[f64],
    x0: f64,
    burn_in_time: f64,
    substeps: usize,
    seed: u64,
) -> Result<f64> {
    check_inputs(model, theta0, x0, substeps)?;
    if !(burn_in_time >= 0.0 && burn_in_time.is_finite()) {
        return Err(Error::Invalid(format!("burn-in must be finite and nonnegative, got {burn_in_time}")));
    }
    if burn_in_time == 0.0 {
        return Ok(x0);
    }
    let n = burn_in_time.ceil().max(1.0) as usize;
    let delta = burn_in_time / n as f64;
    let mut rng = rng::stream(seed);
    integrate(model, theta0, x0, n, delta, substeps, &mut rng, None, None)
}

/// Draws `X_Δ` given `X_0 = x` with `substeps` Euler steps.
pub fn simulate_transition(
    model: &JumpDiffusionModel,
    theta: &[f64],
    x: f64,
    delta: f64,
    substeps: usize,
    rng: &mut Stream,
) -> Result<f64> {
    integrate(model, theta, x, 1, delta, substeps, rng, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_builtin_model, BuiltinModel, BuiltinName, JumpLaw};

    #[test]
    fn zero_rate_matches_plain_euler() {
        let m = BuiltinModel::OuAdditiveJumps { jumps: JumpLaw::Gaussian { mean: 0.0, sd: 0.5, rate: 0.0 } }.build().unwrap();
        let th = [1.0, 0.0, 1.0];
        let scheme = SamplingScheme::new(20, 0.1).unwrap();
        let p = simulate_path(&m, &th, scheme, 0.5, 4, 9).unwrap();
        assert!(p.jump_log.as_ref().unwrap().is_empty());
        let mut rng = rng::stream(9);
        let h = 0.1 / 4.0;
        let mut x = 0.5;
        let mut want = vec![x];
        for i in 0..20 {
            for s in 0..4 {
                let end = if s == 3 { (i + 1) as f64 * 0.1 } else { (i * 4 + s + 1) as f64 * h };
                let start = if s == 0 { i as f64 * 0.1 } else { (i * 4 + s) as f64 * h };
                let e: f64 = StandardNormal.sample(&mut rng);
                let dt = end - start;
                x += -x * dt + dt.sqrt() * e;
            }
            want.push(x);
        }
        for (a, b) in p.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn jump_bookkeeping_is_exact() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        let p = simulate_path(&m, &[1.0, 0.0, 1.0], SamplingScheme::new(500, 0.1).unwrap(), 0.0, 8, 3).unwrap();
        let log = p.jump_log.unwrap();
        assert!(!log.is_empty());
        for w in log.windows(2) {
            assert!(w[0].time < w[1].time);
        }
        for r in &log {
            assert_eq!(r.jump, r.z);
            assert!(r.time > 0.0 && r.time <= 50.0);
        }
    }

    #[test]
    fn zero_burn_in_returns_start() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        assert_eq!(stationary_warmup(&m, &[1.0, 0.0, 1.0], 1.25, 0.0, 8, 1).unwrap(), 1.25);
    }

    #[test]
    fn many_is_worker_independent() {
        let m = make_builtin_model(BuiltinName::OuAdditiveJumps);
        let s = SamplingScheme::new(50, 0.05).unwrap();
        let start = StartPoint::Stationary { x0: 0.0, burn_in: 5.0 };
        let a = simulate_many(&m, &[1.0, 0.0, 1.0], s, start, 8, 11, 8, 1);
        let b = simulate_many(&m, &[1.0, 0.0, 1.0], s, start, 8, 11, 8, 4);
        assert_eq!(a, b);
        let one = simulate_many(&m, &[1.0, 0.0, 1.0], s, start, 8, 11, 1, 1);
        let direct = simulate_path_from(&m, &[1.0, 0.0, 1.0], s, start, 8, rng::splitmix(11, 0));
        assert_eq!(one[0], direct);
    }

    #[test]
    fn scheme_validation() {
        assert!(SamplingScheme::new(1, 0.1).is_err());
        assert!(SamplingScheme::new(10, 1.5).is_err());
        assert!(SamplingScheme::new(10, 1.0).is_ok());
    }
}
