//! Monte Carlo harness: replicated simulate → estimate runs over a ladder of
//! sampling schemes, with bias, spread, coverage, normality and rate
//! summaries.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::estfun::CoordSplit;
use crate::parallel;
use crate::rng;
use crate::simulate::{simulate_path_from, SamplingScheme};
use crate::solve::{multi_start_solve, EstimationResult};
use crate::stats::{self, Slope};

/// Two-sided 95% standard normal quantile.
pub const Z975: f64 = 1.959_963_984_540_054;

/// Threshold on `n Δ^{…}` above which a rung is flagged for a non-martingale
/// estimating function.
pub const SCALING_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub n: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    /// Full sandwich with the common `√(nΔ)` rate.
    #[default]
    Full,
    /// `√(nΔ)` for α and `√n` for β.
    Block,
}

/// The `mc` section of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub ladder: Vec<Rung>,
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub variance: VarianceSource,
}

impl McSection {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::Config(format!("mc.reps must be at least 2, got {}", self.reps)));
        }
        if self.ladder.is_empty() {
            return Err(Error::Config("mc.ladder is empty".into()));
        }
        for r in &self.ladder {
            SamplingScheme::new(r.n, r.delta).map_err(|e| Error::Config(e.to_string()))?;
        }
        for w in self.ladder.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !(b.n > a.n && b.delta <= a.delta && b.n as f64 * b.delta > a.n as f64 * a.delta) {
                return Err(Error::Config(format!(
                    "ladder must have n increasing, delta nonincreasing and n*delta increasing: ({}, {}) -> ({}, {})",
                    a.n, a.delta, b.n, b.delta
                )));
            }
        }
        Ok(())
    }
}

/// A validated configuration with model, θ0, estimating function and mc
/// section all present.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub config: Config,
}

impl ExperimentSpec {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        if config.mc.is_none() {
            return Err(Error::Config("an mc section is required".into()));
        }
        config.model.theta0()?;
        if config.ef.is_none() {
            return Err(Error::Config("an ef section is required".into()));
        }
        Ok(Self { config })
    }

    pub fn mc(&self) -> &McSection {
        self.config.mc.as_ref().expect("checked in new")
    }
}

/// One replication. Failed runs carry NaN estimates and an error message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rung: usize,
    pub rep: usize,
    pub seed: u64,
    pub converged: bool,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub studentized: Vec<f64>,
    /// Full sandwich `V̂_n` when available.
    pub vhat: Option<Vec<Vec<f64>>>,
    pub error: Option<String>,
}

impl RepRecord {
    fn failed(rung: usize, rep: usize, seed: u64, d: usize, error: String) -> Self {
        let nan = vec![f64::NAN; d];
        Self { rung, rep, seed, converged: false, theta_hat: nan.clone(), se: nan.clone(), studentized: nan, vhat: None, error: Some(error) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordSummary {
    pub mean_bias: f64,
    /// `sd / √successes`.
    pub bias_se: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RungSummary {
    pub n: usize,
    pub delta: f64,
    pub reps: usize,
    pub successes: usize,
    pub failures: usize,
    pub coords: Vec<CoordSummary>,
    pub annotations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSlopes {
    pub raw: Vec<Slope>,
    pub drift_jump_rate: Vec<Slope>,
    pub diffusion_rate: Vec<Slope>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub model: String,
    pub ef: String,
    pub theta0: Vec<f64>,
    pub variance: VarianceSource,
    pub rungs: Vec<RungSummary>,
    /// Present with three or more rungs.
    pub rates: Option<RateSlopes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOutput {
    pub summary: McSummary,
    pub records: Vec<RepRecord>,
}

/// Seed of replication `rep` on rung `rung`.
pub fn rep_seed(base_seed: u64, rung: usize, rep: usize) -> u64 {
    rng::splitmix(rng::splitmix(base_seed, rng::RUNG_TAG.wrapping_add(rung as u64)), rep as u64)
}

fn invert(m: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = m.len();
    DMatrix::from_fn(d, d, |i, j| m[i][j])
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian { condition: f64::INFINITY, iterate: vec![] })
}

/// Standard errors under the chosen source.
pub fn standard_errors(res: &EstimationResult, n: usize, delta: f64, source: VarianceSource, split: Option<&CoordSplit>) -> Result<Vec<f64>> {
    let nd = n as f64 * delta;
    match (source, split) {
        (VarianceSource::Full, _) => {
            let v = res.vhat.as_ref().ok_or_else(|| Error::Invalid(res.variance_error.clone().unwrap_or_else(|| "no variance".into())))?;
            Ok((0..v.len()).map(|j| (v[j][j] / nd).sqrt()).collect())
        }
        (VarianceSource::Block, Some(s)) => {
            let b = res.vhat_block.as_ref().ok_or_else(|| Error::Invalid(res.variance_error.clone().unwrap_or_else(|| "no block variance".into())))?;
            let mut se = vec![f64::NAN; s.alpha.len() + 1];
            for (i, &a) in s.alpha.iter().enumerate() {
                se[a] = (b.v1[i][i] / nd).sqrt();
            }
            se[s.beta] = (b.v2 / n as f64).sqrt();
            Ok(se)
        }
        (VarianceSource::Block, None) => Err(Error::MissingCoordSplit),
    }
}

/// `√(nΔ) V̂^{-1/2} (θ̂ − θ0)`, or its block form with `√n` and `V̂2` for β.
pub fn studentize(
    res: &EstimationResult,
    theta0: &[f64],
    n: usize,
    delta: f64,
    source: VarianceSource,
    split: Option<&CoordSplit>,
) -> Result<Vec<f64>> {
    let th = res.theta_hat.to_vec();
    let err: Vec<f64> = th.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let nd = (n as f64 * delta).sqrt();
    match (source, split) {
        (VarianceSource::Full, _) => {
            let root = res.vhat_sqrt.as_ref().ok_or_else(|| Error::Invalid("no variance square root".into()))?;
            let z = invert(root)? * DVector::from_vec(err) * nd;
            Ok(z.iter().copied().collect())
        }
        (VarianceSource::Block, Some(s)) => {
            let b = res.vhat_block.as_ref().ok_or_else(|| Error::Invalid("no block variance".into()))?;
            let ea = DVector::from_iterator(s.alpha.len(), s.alpha.iter().map(|&a| err[a]));
            let za = invert(&b.v1_sqrt)? * ea * nd;
            if !(b.v2 > 0.0) {
                return Err(Error::ZeroDenominator("V̂2 = 0".into()));
            }
            let mut z = vec![f64::NAN; err.len()];
            for (i, &a) in s.alpha.iter().enumerate() {
                z[a] = za[i];
            }
            z[s.beta] = (n as f64).sqrt() * err[s.beta] / b.v2.sqrt();
            Ok(z)
        }
        (VarianceSource::Block, None) => Err(Error::MissingCoordSplit),
    }
}

/// Runs every rung of the ladder. Replications run in parallel and are
/// collected in index order; per-replication errors become failed records.
pub fn run_experiment(spec: &ExperimentSpec, workers: usize) -> Result<McOutput> {
    let cfg = &spec.config;
    let mc = spec.mc();
    let model = cfg.build_model()?;
    let ef = cfg.build_ef(&model)?;
    let theta0 = cfg.model.theta0()?;
    let split = ef.coord_split();
    if mc.variance == VarianceSource::Block && split.is_none() {
        return Err(Error::Config(format!("block variance needs an estimating function with a coordinate split, {} has none", ef.name())));
    }
    let search_box = cfg.estimate.search_box.as_ref().map(|b| b.to_box(model.d1())).transpose()?;
    let starts = cfg.starts();
    let start = cfg.sim.start();
    let d = model.dim();
    let mut records = Vec::with_capacity(mc.ladder.len() * mc.reps);
    for (ri, rung) in mc.ladder.iter().enumerate() {
        let scheme = SamplingScheme::new(rung.n, rung.delta).map_err(|e| Error::Config(e.to_string()))?;
        let batch: Vec<RepRecord> = parallel::with_workers(workers, || {
            (0..mc.reps)
                .into_par_iter()
                .map(|rep| {
                    let seed = rep_seed(mc.base_seed, ri, rep);
                    let fail = |e: String| RepRecord::failed(ri, rep, seed, d, e);
                    let path = match simulate_path_from(&model, &theta0, scheme, start, cfg.sim.substeps, seed) {
                        Ok(p) => p,
                        Err(e) => return fail(e.to_string()),
                    };
                    let res = match multi_start_solve(ef.as_ref(), &path, &starts, &model.param_box, search_box.as_ref(), &cfg.solver) {
                        Ok(r) if r.converged => r,
                        Ok(_) => return fail("solver did not converge".into()),
                        Err(e) => return fail(e.to_string()),
                    };
                    let se = standard_errors(&res, rung.n, rung.delta, mc.variance, split.as_ref());
                    let z = studentize(&res, &theta0, rung.n, rung.delta, mc.variance, split.as_ref());
                    match (se, z) {
                        (Ok(se), Ok(z)) => RepRecord {
                            rung: ri,
                            rep,
                            seed,
                            converged: true,
                            theta_hat: res.theta_hat.to_vec(),
                            se,
                            studentized: z,
                            vhat: res.vhat.clone(),
                            error: None,
                        },
                        (Err(e), _) | (_, Err(e)) => {
                            let mut r = fail(format!("variance unavailable: {e}"));
                            r.theta_hat = res.theta_hat.to_vec();
                            r
                        }
                    }
                })
                .collect()
        });
        records.extend(batch);
    }
    let summary = summarize(&records, &theta0, &mc.ladder, mc.variance, 1.0, model.name.clone(), ef.name().to_string(), scaling_notes(ef.as_ref(), &mc.ladder))?;
    Ok(McOutput { summary, records })
}

/// Rung annotations for estimating functions that are only approximate
/// martingales.
pub fn scaling_notes(ef: &dyn crate::estfun::EstimatingFunction, ladder: &[Rung]) -> Vec<Vec<String>> {
    ladder
        .iter()
        .map(|r| {
            let mut notes = Vec::new();
            if ef.exact_martingale() {
                return notes;
            }
            let k = ef.kappa0();
            let n = r.n as f64;
            let full = n * r.delta.powf(2.0 * k - 1.0);
            if full > SCALING_LIMIT {
                notes.push(format!("n*delta^(2*kappa0-1) = {full:.3e} exceeds {SCALING_LIMIT}; the normal limit may carry a bias"));
            }
            if ef.coord_split().is_some() {
                let block = n * r.delta.powf(2.0 * (k - 1.0));
                if block > SCALING_LIMIT {
                    notes.push(format!("n*delta^(2*(kappa0-1)) = {block:.3e} exceeds {SCALING_LIMIT}; the block limit may carry a bias"));
                }
            }
            notes
        })
        .collect()
}

/// Share of successful replications whose 95% interval
/// `θ̂_j ± z √var_scale · se_j` covers `θ0_j`.
pub fn coverage(records: &[&RepRecord], theta0: &[f64], var_scale: f64) -> Vec<f64> {
    let ok: Vec<&&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    (0..theta0.len())
        .map(|j| {
            let hits = ok.iter().filter(|r| (r.theta_hat[j] - theta0[j]).abs() <= Z975 * var_scale.sqrt() * r.se[j]).count();
            hits as f64 / ok.len() as f64
        })
        .collect()
}

/// Per-rung summaries; `var_scale` multiplies every variance estimate.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    records: &[RepRecord],
    theta0: &[f64],
    ladder: &[Rung],
    variance: VarianceSource,
    var_scale: f64,
    model: String,
    ef: String,
    notes: Vec<Vec<String>>,
) -> Result<McSummary> {
    let d = theta0.len();
    let mut rungs = Vec::with_capacity(ladder.len());
    for (ri, rung) in ladder.iter().enumerate() {
        let here: Vec<&RepRecord> = records.iter().filter(|r| r.rung == ri).collect();
        let ok: Vec<&&RepRecord> = here.iter().filter(|r| r.error.is_none()).collect();
        let cov = coverage(&here, theta0, var_scale);
        let coords = (0..d)
            .map(|j| {
                let est: Vec<f64> = ok.iter().map(|r| r.theta_hat[j]).collect();
                let z: Vec<f64> = ok.iter().map(|r| r.studentized[j] / var_scale.sqrt()).collect();
                let sd = stats::sd(&est);
                CoordSummary {
                    mean_bias: stats::mean(&est) - theta0[j],
                    bias_se: sd / (est.len() as f64).sqrt(),
                    sd,
                    mean_se: stats::mean(&ok.iter().map(|r| r.se[j] * var_scale.sqrt()).collect::<Vec<_>>()),
                    coverage: cov[j],
                    skewness: stats::skewness(&z),
                    excess_kurtosis: stats::excess_kurtosis(&z),
                }
            })
            .collect();
        rungs.push(RungSummary {
            n: rung.n,
            delta: rung.delta,
            reps: here.len(),
            successes: ok.len(),
            failures: here.len() - ok.len(),
            coords,
            annotations: notes.get(ri).cloned().unwrap_or_default(),
        });
    }
    let mut summary = McSummary { model, ef, theta0: theta0.to_vec(), variance, rungs, rates: None };
    if ladder.len() >= 3 {
        summary.rates = Some(RateSlopes {
            raw: rate_regression(&summary, Normalization::Raw)?,
            drift_jump_rate: rate_regression(&summary, Normalization::DriftJumpRate)?,
            diffusion_rate: rate_regression(&summary, Normalization::DiffusionRate)?,
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// log sd on log n.
    Raw,
    /// log sd on log(nΔ), the drift/jump rate.
    DriftJumpRate,
    /// log sd on log n, the diffusion rate.
    DiffusionRate,
}

/// Slope of log empirical sd against the normalization's log sample size,
/// one per coordinate.
pub fn rate_regression(summary: &McSummary, norm: Normalization) -> Result<Vec<Slope>> {
    if summary.rungs.len() < 3 {
        return Err(Error::Invalid(format!("rate regression needs at least 3 rungs, got {}", summary.rungs.len())));
    }
    let x: Vec<f64> = summary
        .rungs
        .iter()
        .map(|r| match norm {
            Normalization::Raw | Normalization::DiffusionRate => (r.n as f64).ln(),
            Normalization::DriftJumpRate => (r.n as f64 * r.delta).ln(),
        })
        .collect();
    let d = summary.theta0.len();
    (0..d)
        .map(|j| {
            let y: Vec<f64> = summary.rungs.iter().map(|r| r.coords[j].sd.ln()).collect();
            stats::ols_slope(&x, &y)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityStats {
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov distance to N(0,1).
    pub ks: f64,
    pub ks_band_99: f64,
    pub within_band: bool,
}

pub const MIN_NORMALITY_REPS: usize = 100;

/// Moments and Kolmogorov distance of studentized errors, one entry per
/// coordinate. Rows are replications.
pub fn normality_diagnostics(studentized: &[Vec<f64>]) -> Result<Vec<NormalityStats>> {
    let rows: Vec<&Vec<f64>> = studentized.iter().filter(|r| r.iter().all(|v| v.is_finite())).collect();
    if rows.len() < MIN_NORMALITY_REPS {
        return Err(Error::InsufficientReplications { got: rows.len(), needed: MIN_NORMALITY_REPS });
    }
    let d = rows[0].len();
    let band = stats::ks_band_99(rows.len());
    Ok((0..d)
        .map(|j| {
            let v: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let ks = stats::ks_normal(&v);
            NormalityStats {
                mean: stats::mean(&v),
                sd: stats::sd(&v),
                skewness: stats::skewness(&v),
                excess_kurtosis: stats::excess_kurtosis(&v),
                ks,
                ks_band_99: band,
                within_band: ks <= band,
            }
        })
        .collect())
}

/// Studentized rows of the successful records of one rung.
pub fn studentized_rows(records: &[RepRecord], rung: usize) -> Vec<Vec<f64>> {
    records.iter().filter(|r| r.rung == rung && r.error.is_none()).map(|r| r.studentized.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EfSection, ModelSection};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn synthetic(sds: &[(usize, f64, f64)]) -> McSummary {
        McSummary {
            model: "m".into(),
            ef: "e".into(),
            theta0: vec![0.0],
            variance: VarianceSource::Full,
            rungs: sds
                .iter()
                .map(|&(n, delta, sd)| RungSummary {
                    n,
                    delta,
                    reps: 2,
                    successes: 2,
                    failures: 0,
                    coords: vec![CoordSummary { mean_bias: 0.0, bias_se: 0.0, sd, mean_se: 0.0, coverage: 1.0, skewness: 0.0, excess_kurtosis: 0.0 }],
                    annotations: vec![],
                })
                .collect(),
            rates: None,
        }
    }

    #[test]
    fn synthetic_rates() {
        let s = synthetic(&[(100, 0.1, 0.3 / 10.0), (400, 0.05, 0.3 / 20.0), (1600, 0.025, 0.3 / 40.0)]);
        let raw = rate_regression(&s, Normalization::Raw).unwrap();
        assert!((raw[0].slope + 0.5).abs() < 1e-12);
        let c = synthetic(&[(100, 0.1, 2.0), (400, 0.05, 2.0), (1600, 0.025, 2.0)]);
        assert_eq!(rate_regression(&c, Normalization::DriftJumpRate).unwrap()[0].slope, 0.0);
        let short = synthetic(&[(100, 0.1, 1.0), (400, 0.05, 1.0)]);
        assert!(rate_regression(&short, Normalization::Raw).is_err());
    }

    #[test]
    fn normality_null_and_shift() {
        let mut r = rng::stream(5);
        let rows: Vec<Vec<f64>> = (0..2000).map(|_| vec![r.sample::<f64, _>(StandardNormal)]).collect();
        let s = normality_diagnostics(&rows).unwrap();
        assert!(s[0].within_band);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|v| vec![v[0] + 1.0]).collect();
        let s = normality_diagnostics(&shifted).unwrap();
        assert!((s[0].mean - 1.0).abs() < 0.1 && !s[0].within_band);
        assert!(matches!(normality_diagnostics(&rows[..50]), Err(Error::InsufficientReplications { got: 50, .. })));
    }

    fn tiny_spec(reps: usize) -> ExperimentSpec {
        let mut cfg = Config::for_model("quadratic_ef_model");
        cfg.model = ModelSection { theta0: Some(vec![1.0, 0.5]), ..ModelSection::named("quadratic_ef_model") };
        cfg.ef = Some(EfSection::named("quadratic"));
        cfg.sim.substeps = 4;
        cfg.mc = Some(McSection { ladder: vec![Rung { n: 400, delta: 0.05 }], reps, base_seed: 3, variance: VarianceSource::Full });
        ExperimentSpec::new(cfg).unwrap()
    }

    #[test]
    fn tiny_run_is_deterministic_and_accounted() {
        let spec = tiny_spec(6);
        let a = run_experiment(&spec, 1).unwrap();
        let b = run_experiment(&spec, 3).unwrap();
        assert_eq!(format!("{:?}", a.records), format!("{:?}", b.records));
        let r = &a.summary.rungs[0];
        assert_eq!(r.successes + r.failures, 6);
        assert!(r.coords[0].sd > 0.0);
        let refs: Vec<&RepRecord> = a.records.iter().collect();
        let c1 = coverage(&refs, &[1.0, 0.5], 1.0);
        let c4 = coverage(&refs, &[1.0, 0.5], 4.0);
        assert!(c1.iter().zip(&c4).all(|(x, y)| y >= x));
    }

    #[test]
    fn ladder_direction_is_enforced() {
        let s = McSection { ladder: vec![Rung { n: 400, delta: 0.05 }, Rung { n: 300, delta: 0.05 }], reps: 2, base_seed: 0, variance: VarianceSource::Full };
        assert!(s.validate().unwrap_err().is_config());
        let s = McSection { ladder: vec![Rung { n: 400, delta: 0.05 }], reps: 1, base_seed: 0, variance: VarianceSource::Full };
        assert!(s.validate().is_err());
    }
}
