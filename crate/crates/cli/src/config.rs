//! Scenario configuration: strict JSON schema and conversion into a
//! schedule, a constant part and a perturbation.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use kamred::arith::ApproxFn;
use kamred::driver::{
    a_bar, brjuno_sum_threshold, make_schedule, smallness_explicit, SmallnessCase,
};
use kamred::step::PreconditionPolicy;
use kamred::torus::TorusMapJson;
use kamred::{KamSchedule, Mat2, RunOptions, ScheduleParams, Sl2, TorusMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub omega: Vec<f64>,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_prime: Option<f64>,
    #[serde(rename = "G")]
    pub big_g: ApproxFn,
    pub g: ApproxFn,
    pub r0: f64,
    pub n0: u32,
    pub eps0: Eps0,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_prime: Option<f64>,
    #[serde(default = "yes")]
    pub require_condepsilon: bool,
    #[serde(default)]
    pub require_condepsilon2: bool,
    pub system: System,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cert_tol: Option<f64>,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_modes: Option<usize>,
    #[serde(default = "default_policy")]
    pub policy: PreconditionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<RotationConfig>,
}

fn yes() -> bool {
    true
}

fn default_max_steps() -> usize {
    RunOptions::default().max_steps
}

fn default_residual_tol() -> f64 {
    RunOptions::default().residual_tol
}

fn default_policy() -> PreconditionPolicy {
    PreconditionPolicy::Record
}

/// `ε₀` given directly, or computed from a closed-form threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eps0 {
    Value(f64),
    Auto(AutoEps0),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoEps0 {
    #[serde(rename = "auto:dioph")]
    Dioph,
    #[serde(rename = "auto:brjuno-sum")]
    BrjunoSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum System {
    /// `A = [[0, V̂(0)−E],[1,0]]`, `F = [[0, V−V̂(0)],[0,0]]` with
    /// `V(θ) = Σ c cos(2π⟨k,θ⟩)`.
    Schrodinger {
        #[serde(rename = "E")]
        e: f64,
        #[serde(rename = "V", default)]
        v: Vec<CosineTerm>,
    },
    Custom {
        #[serde(rename = "A")]
        a: [[f64; 2]; 2],
        #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
        f: Option<TorusMapJson>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineTerm {
    pub k: Vec<i32>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationConfig {
    #[serde(rename = "T", default = "default_t")]
    pub t: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub phi0: f64,
    /// Absolute tolerance added to the additivity allowance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

fn default_t() -> f64 {
    kamred::rotation::DEFAULT_T
}

fn default_h() -> f64 {
    kamred::rotation::DEFAULT_H
}

/// A config that could not be read or does not match the schema.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: &Path) -> std::result::Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> std::result::Result<RunConfig, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            ConfigError(format!(
                "line {} column {}, field `{}`: {}",
                inner.line(),
                inner.column(),
                e.path(),
                inner
            ))
        })?;
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.omega.len();
        if d == 0 || self.omega.iter().any(|w| !w.is_finite()) {
            bail!("field `omega`: need a non-empty vector of finite numbers");
        }
        if self.kappa.is_nan() || self.kappa <= 0.0 {
            bail!("field `kappa`: must be positive");
        }
        if self.r0.is_nan() || self.r0 <= 0.0 {
            bail!("field `r0`: must be positive");
        }
        self.big_g.validate().context("field `G`")?;
        self.g.validate().context("field `g`")?;
        if let Eps0::Value(e) = self.eps0 {
            if !(e > 0.0 && e.is_finite()) {
                bail!("field `eps0`: must be positive");
            }
        }
        if let Some(a) = self.a {
            if !(a > 0.0 && a < 1.0) {
                bail!("field `a`: must lie in (0, 1)");
            }
        }
        match &self.system {
            System::Schrodinger { v, .. } => {
                if let Some(t) = v.iter().find(|t| t.k.len() != d) {
                    bail!(
                        "field `system.V`: mode {:?} does not have dimension {d}",
                        t.k
                    );
                }
            }
            System::Custom { f: Some(f), .. } if f.dim != d => {
                bail!("field `system.F`: dimension {} differs from omega", f.dim);
            }
            _ => {}
        }
        Ok(())
    }

    pub fn params(&self) -> ScheduleParams {
        let mut p = ScheduleParams::new(
            self.kappa,
            self.big_g.clone(),
            self.g.clone(),
            self.r0,
            self.n0,
        );
        p.kappa_prime = self.kappa_prime.unwrap_or(self.kappa);
        p.a = self.a;
        if let Some(c) = self.c_prime {
            p.c_prime = c;
        }
        p.require_condepsilon = self.require_condepsilon;
        p.require_condepsilon2 = self.require_condepsilon2;
        p
    }

    /// `ln ε₀` before the feasibility search.
    pub fn ln_eps0_hint(&self) -> Result<f64> {
        let gg = ApproxFn::product(&self.big_g, &self.g);
        match self.eps0 {
            Eps0::Value(e) => Ok(e.ln()),
            Eps0::Auto(AutoEps0::Dioph) => {
                let s = power_exponent(&gg)
                    .ok_or_else(|| anyhow!("auto:dioph needs power-law G and g"))?;
                Ok(smallness_explicit(
                    SmallnessCase::Dioph { s },
                    self.kappa,
                    self.r0,
                    self.n0,
                ))
            }
            Eps0::Auto(AutoEps0::BrjunoSum) => {
                let a = self.a.unwrap_or_else(|| 1.0 - a_bar(&gg));
                let t = brjuno_sum_threshold(self.kappa, self.r0, self.n0, a, &gg)?;
                Ok(t.ln_eps0)
            }
        }
    }

    pub fn schedule(&self) -> kamred::Result<KamSchedule> {
        let hint = self
            .ln_eps0_hint()
            .map_err(|e| kamred::KamError::Invalid(e.to_string()))?;
        make_schedule(&self.params(), hint)
    }

    pub fn run_options(&self) -> RunOptions {
        let mut o = RunOptions {
            max_steps: self.max_steps,
            cert_tol: self.cert_tol,
            residual_tol: self.residual_tol,
            policy: self.policy,
            ..RunOptions::default()
        };
        if let Some(m) = self.max_modes {
            o.max_modes = m;
        }
        o
    }

    pub fn system(&self) -> Result<(Sl2, TorusMap)> {
        let d = self.omega.len();
        match &self.system {
            System::Schrodinger { e, v } => {
                let mean: f64 = v
                    .iter()
                    .filter(|t| t.k.iter().all(|&x| x == 0))
                    .map(|t| t.c)
                    .sum();
                let a = Sl2::new([[0.0, mean - e], [1.0, 0.0]])?;
                let modes: Vec<(Vec<i32>, Mat2)> = v
                    .iter()
                    .filter(|t| t.k.iter().any(|&x| x != 0))
                    .map(|t| (t.k.clone(), Mat2::from_real([[0.0, t.c / 2.0], [0.0, 0.0]])))
                    .collect();
                Ok((a, TorusMap::real_from_modes(d, &modes)))
            }
            System::Custom { a, f } => {
                let a = Sl2::new(*a)?;
                let f = match f {
                    Some(f) => TorusMap::from_json_value(f)?,
                    None => TorusMap::zero(d),
                };
                Ok((a, f))
            }
        }
    }

    /// `A + F` as one map, for direct integration.
    pub fn full_system(&self) -> Result<TorusMap> {
        let (a, f) = self.system()?;
        Ok(f.add_constant(&a.to_mat2()))
    }
}

/// `s` when `f(t) = t^s`.
fn power_exponent(f: &ApproxFn) -> Option<f64> {
    match f {
        ApproxFn::Power { mu } => Some(*mu),
        ApproxFn::Product { factors } => factors.iter().map(power_exponent).sum(),
        _ => None,
    }
}
