//! JSON configuration shared by the CLI subcommands and the Monte Carlo
//! harness. Unknown keys are rejected and numeric ranges checked on load.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estfun::{build_ef, make_quadratic_ef, ConstantWeight, EfName, EstimatingFunction, OrderConfig, Weight};
use crate::inference::{ErgodicConfig, ReachConfig, CONDITION_TOL};
use crate::mc::McSection;
use crate::model::{BuiltinModel, BuiltinName, JumpDiffusionModel, JumpLaw, ParamBox};
use crate::quadrature::QuadratureConfig;
use crate::solve::{SolverConfig, Starts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSpec {
    pub fn to_box(&self, d1: usize) -> Result<ParamBox> {
        ParamBox::new(self.lower.clone(), self.upper.clone(), d1).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Built-in model selection with optional overrides of its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, rename = "box")]
    pub param_box: Option<BoxSpec>,
    #[serde(default)]
    pub jumps: Option<JumpLaw>,
    #[serde(default)]
    pub m0: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub base_rate: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

impl ModelSection {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), theta0: None, param_box: None, jumps: None, m0: None, kappa: None, base_rate: None, scale: None }
    }

    pub fn builtin(&self) -> Result<BuiltinModel> {
        let name = BuiltinName::parse(&self.name)?;
        let reject = |what: &str| Err(Error::Config(format!("model {} has no {what} setting", self.name)));
        let mut m = BuiltinModel::default_for(name);
        match &mut m {
            BuiltinModel::OuAdditiveJumps { jumps } => {
                if self.m0.is_some() || self.kappa.is_some() || self.base_rate.is_some() || self.scale.is_some() {
                    return reject("m0/kappa/base_rate/scale");
                }
                if let Some(j) = &self.jumps {
                    *jumps = j.clone();
                }
            }
            BuiltinModel::QuadraticEfModel { m0, jumps } => {
                if self.kappa.is_some() || self.base_rate.is_some() || self.scale.is_some() {
                    return reject("kappa/base_rate/scale");
                }
                if let Some(v) = self.m0 {
                    *m0 = v;
                }
                if let Some(j) = &self.jumps {
                    *jumps = j.clone();
                }
            }
            BuiltinModel::DriftjumpKnownDiffusion { kappa, base_rate, scale } => {
                if self.jumps.is_some() || self.m0.is_some() {
                    return reject("jumps/m0");
                }
                *kappa = self.kappa.unwrap_or(*kappa);
                *base_rate = self.base_rate.unwrap_or(*base_rate);
                *scale = self.scale.unwrap_or(*scale);
            }
        }
        Ok(m)
    }

    /// Jump law of the selected model, when it has one.
    pub fn jump_law(&self) -> Result<Option<JumpLaw>> {
        Ok(match self.builtin()? {
            BuiltinModel::OuAdditiveJumps { jumps } | BuiltinModel::QuadraticEfModel { jumps, .. } => Some(jumps),
            BuiltinModel::DriftjumpKnownDiffusion { .. } => None,
        })
    }

    pub fn build(&self, quadrature: &QuadratureConfig) -> Result<JumpDiffusionModel> {
        let model = self.builtin()?.build().map_err(|e| Error::Config(e.to_string()))?.with_quadrature(*quadrature);
        let model = match &self.param_box {
            Some(b) => {
                let pbox = b.to_box(model.d1())?;
                model.with_box(pbox).map_err(|e| Error::Config(e.to_string()))?
            }
            None => model,
        };
        if let Some(t) = &self.theta0 {
            if !model.param_box.contains(t) {
                return Err(Error::Config(format!("model.theta0 {t:?} is not inside the parameter box")));
            }
        }
        Ok(model)
    }

    pub fn theta0(&self) -> Result<Vec<f64>> {
        self.theta0.clone().ok_or_else(|| Error::Config("model.theta0 is required".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n: Option<usize>,
    pub delta: Option<f64>,
    pub substeps: usize,
    /// Positive values start from an approximate stationary draw.
    pub burn_in: f64,
    pub seed: u64,
    pub x0: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { n: None, delta: None, substeps: 32, burn_in: 0.0, seed: 1, x0: 0.0 }
    }
}

impl SimSection {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 || self.substeps > 1_000_000 {
            return Err(Error::Config(format!("sim.substeps must lie in [1, 1000000], got {}", self.substeps)));
        }
        if !(self.burn_in >= 0.0 && self.burn_in.is_finite()) {
            return Err(Error::Config("sim.burn_in must be finite and nonnegative".into()));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("sim.delta must be positive, got {d}")));
            }
        }
        if matches!(self.n, Some(n) if n < 2) {
            return Err(Error::Config("sim.n must be at least 2".into()));
        }
        if !self.x0.is_finite() {
            return Err(Error::Config("sim.x0 must be finite".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> crate::simulate::StartPoint {
        if self.burn_in > 0.0 {
            crate::simulate::StartPoint::Stationary { x0: self.x0, burn_in: self.burn_in }
        } else {
            crate::simulate::StartPoint::Fixed { x0: self.x0 }
        }
    }
}

/// Constant replacements for the quadratic function's default weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSpec {
    pub m1: Option<f64>,
    pub m2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfSection {
    pub name: String,
    #[serde(default)]
    pub weights: Option<WeightSpec>,
}

impl EfSection {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), weights: None }
    }

    pub fn build(&self, model: &JumpDiffusionModel, section: &ModelSection) -> Result<Arc<dyn EstimatingFunction>> {
        let name = EfName::parse(&self.name)?;
        if let Some(w) = &self.weights {
            if name != EfName::Quadratic {
                return Err(Error::Config("ef.weights applies only to the quadratic estimating function".into()));
            }
            let c = |v: Option<f64>| v.map(|x| Arc::new(ConstantWeight(x)) as Arc<dyn Weight>);
            return Ok(Arc::new(make_quadratic_ef(model, c(w.m1), c(w.m2)).map_err(|e| Error::Config(e.to_string()))?));
        }
        let jumps = section.jump_law()?;
        build_ef(name, model, jumps.as_ref()).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    #[serde(default)]
    pub starts: Option<Starts>,
    /// Region searched for roots; Θ when absent.
    #[serde(default)]
    pub search_box: Option<BoxSpec>,
}

/// Settings for `check-ef`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    /// Initial state of the order check.
    pub x: f64,
    pub order: OrderConfig,
    pub x_grid: Option<Vec<f64>>,
    pub theta_grid: Option<Vec<Vec<f64>>>,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            x: 0.0,
            order: OrderConfig { deltas: vec![0.2, 0.1, 0.05, 0.025], mc_samples: 100_000, seed: 11, delta0: None, substeps: 32 },
            x_grid: None,
            theta_grid: None,
        }
    }
}

/// Grids for `check-conditions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionsSection {
    pub theta_grid: Option<Vec<Vec<f64>>>,
    pub alpha_grid: Option<Vec<Vec<f64>>>,
    pub x_grid: Vec<f64>,
    pub w_samples: Vec<f64>,
    pub tol: f64,
    pub reach: ReachConfig,
}

impl Default for ConditionsSection {
    fn default() -> Self {
        Self {
            theta_grid: None,
            alpha_grid: None,
            x_grid: (0..9).map(|i| -2.0 + 0.5 * i as f64).collect(),
            w_samples: (0..17).map(|i| -4.0 + 0.5 * i as f64).collect(),
            tol: CONDITION_TOL,
            reach: ReachConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub ef: Option<EfSection>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub ergodic: ErgodicConfig,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub conditions: ConditionsSection,
    #[serde(default)]
    pub mc: Option<McSection>,
}

impl Config {
    pub fn for_model(name: &str) -> Self {
        Self {
            model: ModelSection::named(name),
            sim: SimSection::default(),
            ef: None,
            solver: SolverConfig::default(),
            estimate: EstimateSection::default(),
            quadrature: QuadratureConfig::default(),
            ergodic: ErgodicConfig::default(),
            check: CheckSection::default(),
            conditions: ConditionsSection::default(),
            mc: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.quadrature.validate()?;
        self.solver.validate()?;
        self.sim.validate()?;
        self.ergodic.validate()?;
        let model = self.model.build(&self.quadrature)?;
        if let Some(ef) = &self.ef {
            let built = ef.build(&model, &self.model)?;
            if built.dim() != model.dim() {
                return Err(Error::Config(format!("ef {} has dimension {} but the model has {} parameters", ef.name, built.dim(), model.dim())));
            }
        }
        if let Some(b) = &self.estimate.search_box {
            b.to_box(model.d1())?;
        }
        if !(self.conditions.tol > 0.0) {
            return Err(Error::Config("conditions.tol must be positive".into()));
        }
        if let Some(mc) = &self.mc {
            mc.validate()?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<JumpDiffusionModel> {
        self.model.build(&self.quadrature)
    }

    pub fn build_ef(&self, model: &JumpDiffusionModel) -> Result<Arc<dyn EstimatingFunction>> {
        self.ef.as_ref().ok_or_else(|| Error::Config("an ef section is required".into()))?.build(model, &self.model)
    }

    pub fn starts(&self) -> Starts {
        self.estimate.starts.clone().unwrap_or(Starts::Count(self.solver.starts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = Config::from_json(r#"{"model": {"name": "ou_additive_jumps", "colour": 1}}"#).unwrap_err();
        assert!(e.is_config());
        let e = Config::from_json(r#"{"model": {"name": "ou_additive_jumps"}, "extra": {}}"#).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn ranges_are_checked() {
        let e = Config::from_json(r#"{"model": {"name": "quadratic_ef_model"}, "quadrature": {"tol": 0}}"#).unwrap_err();
        assert!(e.is_config());
        let e = Config::from_json(r#"{"model": {"name": "quadratic_ef_model", "theta0": [9, 0.5]}}"#).unwrap_err();
        assert!(e.to_string().contains("theta0"));
        let e = Config::from_json(r#"{"model": {"name": "quadratic_ef_model"}, "ef": {"name": "linear_drift"}}"#).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn overrides_apply() {
        let cfg = Config::from_json(
            r#"{"model": {"name": "ou_additive_jumps", "jumps": {"kind": "atoms", "atoms": [-2, 2], "probs": [0.5, 0.5], "rate": 1}},
                "ef": {"name": "rate_optimal_lattice"}}"#,
        )
        .unwrap();
        let m = cfg.build_model().unwrap();
        assert_eq!(cfg.build_ef(&m).unwrap().name(), "rate_optimal_lattice");
    }
}
