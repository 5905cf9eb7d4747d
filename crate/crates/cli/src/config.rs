//! JSON run configuration. Every key is optional; unknown keys are rejected.

use std::path::PathBuf;

use forced_kepler::integrator::Tolerances;
use forced_kepler::kepler::{normalize_forcing, ForcingKind, ForcingSpec, Monomial, OrbitalElements, TrigCoefficient};
use forced_kepler::orbit_finder::{NewtonOptions, RegularizationKind};
use forced_kepler::rtbp::{build_rtbp_forcing, PrimaryOrbit};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForcingConfig {
    #[default]
    Zero,
    /// `U = eps0 (q1 cos 2 pi t + q2 sin 2 pi t)`.
    RotatingLinear { eps0: f64 },
    /// `U = <c(t), q>`, one coefficient per coordinate.
    Linear { coefficients: Vec<TrigCoefficient> },
    Polynomial { terms: Vec<Monomial> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrateSystem {
    Cartesian,
    LeviCivita,
    Moser,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(default)]
    pub t: f64,
    /// Defaults to the zero level of the extended energy.
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateConfig {
    #[serde(default = "default_system")]
    pub system: IntegrateSystem,
    pub initial: Option<InitialState>,
    pub elements: Option<OrbitalElements>,
    /// Physical time to integrate over.
    #[serde(default = "one")]
    pub duration: f64,
    /// Output spacing in physical time (Cartesian) or fictitious time.
    pub stride: Option<f64>,
}

fn default_system() -> IntegrateSystem {
    IntegrateSystem::LeviCivita
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown format `{other}` (expected csv, json or svg)")),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: Option<usize>,
    pub regularization: Option<RegularizationKind>,
    #[serde(default)]
    pub forcing: ForcingConfig,
    pub epsilon: Option<f64>,
    pub n: Option<u32>,
    pub n_range: Option<[u32; 2]>,
    pub n_max: Option<u32>,
    pub epsilon_schedule: Option<Vec<f64>>,
    pub tolerances: Option<Tolerances>,
    pub newton: Option<NewtonOptions>,
    pub rtbp: Option<PrimaryOrbit>,
    pub kappas: Option<Vec<f64>>,
    pub integrate: Option<IntegrateConfig>,
    pub out: Option<PathBuf>,
    pub formats: Option<Vec<String>>,
    pub jobs: Option<usize>,
    /// Radius around collisions excluded from ODE-residual checks.
    pub collision_window: Option<f64>,
}

/// Parses a configuration document, reporting the offending field path.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!("{path}: {inner}"))
    })
}

/// Settings after merging flags over the document and validating.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub dimension: usize,
    pub regularization: RegularizationKind,
    pub forcing: ForcingSpec,
    pub epsilon: f64,
    pub tol: Tolerances,
    pub newton: NewtonOptions,
    pub out: PathBuf,
    pub formats: Vec<Format>,
    pub jobs: Option<usize>,
    pub collision_window: f64,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let dimension = self.dimension.or(self.rtbp.as_ref().map(|r| r.dim)).unwrap_or(2);
        if dimension == 0 {
            return Err(cfg_err("dimension: must be at least 1"));
        }
        let regularization = self.regularization.unwrap_or(if dimension <= 2 {
            RegularizationKind::LeviCivita
        } else {
            RegularizationKind::Moser
        });
        if regularization == RegularizationKind::LeviCivita && dimension != 2 {
            return Err(cfg_err("regularization: levi-civita requires dimension 2"));
        }
        let epsilon = self.epsilon.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(cfg_err(format!("epsilon: {epsilon} outside [0, 1]")));
        }
        let forcing = match &self.rtbp {
            Some(po) => {
                if !matches!(self.forcing, ForcingConfig::Zero) {
                    return Err(cfg_err("forcing: must be omitted when an rtbp block is given"));
                }
                if po.dim != dimension {
                    return Err(cfg_err("rtbp.dim: must match dimension"));
                }
                build_rtbp_forcing(po).map_err(|e| cfg_err(format!("rtbp: {e}")))?.with_epsilon(epsilon)
            }
            None => self.forcing_spec(dimension, epsilon)?,
        };
        forcing.validate().map_err(|e| cfg_err(format!("forcing: {e}")))?;
        let tol = self.tolerances.unwrap_or_default();
        if !(tol.rtol > 0.0 && tol.atol > 0.0) {
            return Err(cfg_err("tolerances: rtol and atol must be positive"));
        }
        let mut newton = self.newton.clone().unwrap_or_default();
        if !(newton.tol > 0.0) || newton.max_iter == 0 {
            return Err(cfg_err("newton: tol must be positive and max_iter at least 1"));
        }
        newton.integration = tol;
        let formats = match &self.formats {
            Some(list) => {
                let mut v = list.iter().map(|s| s.parse::<Format>().map_err(|e| cfg_err(format!("formats: {e}")))).collect::<Result<Vec<_>, _>>()?;
                v.sort();
                v.dedup();
                v
            }
            None => vec![Format::Csv, Format::Json],
        };
        if self.jobs == Some(0) {
            return Err(cfg_err("jobs: must be at least 1"));
        }
        if let Some(r) = self.n_range {
            if r[0] == 0 || r[0] > r[1] {
                return Err(cfg_err("n_range: need 1 <= first <= last"));
            }
        }
        if self.n == Some(0) {
            return Err(cfg_err("n: must be at least 1"));
        }
        if let Some(s) = &self.epsilon_schedule {
            if s.first() != Some(&0.0) || s.windows(2).any(|w| w[1] < w[0]) || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(cfg_err("epsilon_schedule: must start at 0, be nondecreasing and lie in [0, 1]"));
            }
        }
        Ok(Resolved {
            dimension,
            regularization,
            forcing,
            epsilon,
            tol,
            newton,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            formats,
            jobs: self.jobs,
            collision_window: self.collision_window.unwrap_or(1e-4),
        })
    }

    fn forcing_spec(&self, dim: usize, epsilon: f64) -> Result<ForcingSpec, CliError> {
        Ok(match &self.forcing {
            ForcingConfig::Zero => ForcingSpec::zero(dim),
            ForcingConfig::RotatingLinear { eps0 } => {
                if dim < 2 {
                    return Err(cfg_err("forcing: rotating-linear needs dimension >= 2"));
                }
                ForcingSpec::rotating_linear(dim, epsilon, *eps0)
            }
            ForcingConfig::Linear { coefficients } => {
                if coefficients.len() != dim {
                    return Err(cfg_err(format!("forcing.coefficients: expected {dim} entries")));
                }
                normalize_forcing(&ForcingSpec::new(dim, epsilon, ForcingKind::Linear(coefficients.clone())))
            }
            ForcingConfig::Polynomial { terms } => {
                if terms.iter().any(|t| t.powers.len() != dim) {
                    return Err(cfg_err(format!("forcing.terms: each powers list needs {dim} entries")));
                }
                normalize_forcing(&ForcingSpec::new(dim, epsilon, ForcingKind::Polynomial(terms.clone())))
            }
        })
    }
}

impl Resolved {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_the_field() {
        let err = parse_config(r#"{"forcing": {"kind": "rotating-linear", "eps0": 1e-3, "bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("forcing"), "{err}");
        let err = parse_config(r#"{"dimesion": 2}"#).unwrap_err();
        assert!(err.to_string().contains("dimesion"), "{err}");
    }

    #[test]
    fn bad_forcing_kind_is_reported_with_path() {
        let err = parse_config(r#"{"forcing": {"kind": "quadrupole"}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("forcing") && msg.contains("quadrupole"), "{msg}");
    }

    #[test]
    fn defaults_resolve() {
        let r = parse_config("{}").unwrap().resolve().unwrap();
        assert_eq!(r.dimension, 2);
        assert_eq!(r.regularization, RegularizationKind::LeviCivita);
        assert!(r.forcing.is_zero());
        assert_eq!(r.formats, vec![Format::Csv, Format::Json]);
    }

    #[test]
    fn rejects_invalid_values() {
        for doc in [
            r#"{"epsilon": 2}"#,
            r#"{"n_range": [3, 2]}"#,
            r#"{"dimension": 3, "regularization": "levi-civita"}"#,
            r#"{"rtbp": {"m1": 1, "m2": 1e-3, "e": 1}}"#,
            r#"{"formats": ["png"]}"#,
            r#"{"epsilon_schedule": [0.5, 1]}"#,
        ] {
            assert!(parse_config(doc).unwrap().resolve().is_err(), "{doc}");
        }
    }

    #[test]
    fn three_dimensional_default_is_moser() {
        let r = parse_config(r#"{"dimension": 3}"#).unwrap().resolve().unwrap();
        assert_eq!(r.regularization, RegularizationKind::Moser);
    }
}
