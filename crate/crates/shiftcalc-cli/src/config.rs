//! Experiment configuration: one TOML file (JSON accepted) per run.
//!
//! ```toml
//! experiment = "verify-pushforward"
//!
//! [mc]
//! replicas = 200000
//! seed = 42
//!
//! [grid]
//! t = 1.0
//! m = 5
//! r = 2
//!
//! [[models]]
//! kind = "collision"
//! eps = 0.1
//!
//! [density]
//! kind = "gaussian"
//! sd = 1.0
//!
//! [params]
//! shifts = [0.25, 0.5]
//! ```
//!
//! `params` holds the experiment-specific keys; unknown keys anywhere are
//! rejected with the path of the offending field.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shiftcalc::basis::Grid;
use shiftcalc::measure::DensityModel;
use shiftcalc::process::{Collision, Identity, JumpRule, ProcessModel, Switching};

/// Smallest replica count a config may ask for.
pub const MIN_REPLICAS: usize = 1000;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

pub fn config_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub mc: McSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
    #[serde(default = "empty_table", skip_serializing_if = "is_empty_table")]
    pub params: serde_json::Value,
}

fn empty_table() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

fn is_empty_table(v: &serde_json::Value) -> bool {
    v.as_object().is_some_and(|m| m.is_empty())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t: f64,
    pub m: u32,
    pub r: u32,
}

impl GridSpec {
    pub fn build(&self, dim: usize) -> ConfigResult<Grid> {
        Grid::new(self.t, self.m, self.r, dim).map_err(|e| config_err(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Identity {
        #[serde(default)]
        dim: Option<usize>,
    },
    Switching {
        a: f64,
        eps: f64,
    },
    Collision {
        #[serde(default = "two")]
        particles: usize,
        eps: f64,
        #[serde(default = "default_refractory")]
        refractory: f64,
        #[serde(default)]
        rule: RuleSpec,
        #[serde(default)]
        kappa: Option<f64>,
    },
}

fn two() -> usize {
    2
}

fn default_refractory() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleSpec {
    #[default]
    Swap,
    Kick,
}

impl ModelSpec {
    /// Short label used in check names and by filters.
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Identity { .. } => "identity",
            ModelSpec::Switching { .. } => "switching",
            ModelSpec::Collision { .. } => "collision",
        }
    }

    /// Dimension of `F` the model runs in; identity defaults to one.
    pub fn dim(&self) -> usize {
        match *self {
            ModelSpec::Identity { dim } => dim.unwrap_or(1),
            ModelSpec::Switching { .. } => 1,
            ModelSpec::Collision { particles, .. } => 2 * particles,
        }
    }

    pub fn build(&self, at: usize) -> ConfigResult<Box<dyn ProcessModel>> {
        let field = |e: shiftcalc::Error| config_err(format!("models[{at}]: {e}"));
        Ok(match *self {
            ModelSpec::Identity { .. } => Box::new(Identity),
            ModelSpec::Switching { a, eps } => Box::new(Switching::new(a, eps).map_err(field)?),
            ModelSpec::Collision { particles, eps, refractory, rule, kappa } => {
                let rule = match (rule, kappa) {
                    (RuleSpec::Swap, None) => JumpRule::Swap,
                    (RuleSpec::Swap, Some(_)) => {
                        return Err(config_err(format!("models[{at}].kappa: only the kick rule takes kappa")))
                    }
                    (RuleSpec::Kick, Some(kappa)) => JumpRule::Kick { kappa },
                    (RuleSpec::Kick, None) => return Err(config_err(format!("models[{at}].kappa: the kick rule needs kappa"))),
                };
                Box::new(Collision::new(particles, eps, refractory, rule).map_err(field)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Centred Gaussian; the dimension follows the model unless given.
    Gaussian {
        #[serde(default)]
        dim: Option<usize>,
        sd: f64,
    },
    /// Smooth bump on a box, one `[lo, hi]` pair per coordinate.
    Bump { r#box: Vec<[f64; 2]> },
    CosSquared { r#box: Vec<[f64; 2]>, q: f64 },
    Plateau { r#box: Vec<[f64; 2]>, width: f64 },
}

impl DensitySpec {
    /// Builds the density in dimension `dim`, rejecting a mismatch with an
    /// explicitly given dimension.
    pub fn build(&self, dim: usize) -> ConfigResult<DensityModel> {
        let boxed = |b: &[[f64; 2]]| -> ConfigResult<Vec<(f64, f64)>> {
            if b.len() != dim {
                return Err(config_err(format!("density.box: {} intervals for dimension {dim}", b.len())));
            }
            Ok(b.iter().map(|p| (p[0], p[1])).collect())
        };
        let built = match self {
            DensitySpec::Gaussian { dim: given, sd } => {
                if let Some(g) = given {
                    if *g != dim {
                        return Err(config_err(format!("density.dim: {g} but the model needs {dim}")));
                    }
                }
                DensityModel::gaussian(dim, *sd)
            }
            DensitySpec::Bump { r#box } => DensityModel::bump(&boxed(r#box)?),
            DensitySpec::CosSquared { r#box, q } => DensityModel::cos_squared(&boxed(r#box)?, *q),
            DensitySpec::Plateau { r#box, width } => DensityModel::plateau(&boxed(r#box)?, *width),
        };
        built.map_err(|e| config_err(format!("density: {e}")))
    }

    /// Dimension fixed by the spec itself, if any.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            DensitySpec::Gaussian { dim, .. } => *dim,
            DensitySpec::Bump { r#box } | DensitySpec::CosSquared { r#box, .. } | DensitySpec::Plateau { r#box, .. } => {
                Some(r#box.len())
            }
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json)
    }

    pub fn parse(text: &str, json: bool) -> ConfigResult<Self> {
        let value: serde_json::Value = if json {
            serde_json::from_str(text).map_err(|e| config_err(format!("invalid JSON: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| config_err(format!("invalid TOML: {e}")))?
        };
        let cfg: Self = from_value(value, "")?;
        if cfg.mc.replicas < MIN_REPLICAS {
            return Err(config_err(format!("mc.replicas: {} is below the minimum {MIN_REPLICAS}", cfg.mc.replicas)));
        }
        if !cfg.params.is_object() {
            return Err(config_err("params: expected a table"));
        }
        Ok(cfg)
    }

    /// Experiment parameters with defaults filled in.
    pub fn params<T: DeserializeOwned>(&self) -> ConfigResult<T> {
        from_value(self.params.clone(), "params")
    }

    pub fn grid_spec(&self) -> ConfigResult<GridSpec> {
        self.grid.ok_or_else(|| config_err("grid: missing section"))
    }

    pub fn density_spec(&self) -> ConfigResult<&DensitySpec> {
        self.density.as_ref().ok_or_else(|| config_err("density: missing section"))
    }

    pub fn require_models(&self) -> ConfigResult<&[ModelSpec]> {
        if self.models.is_empty() {
            return Err(config_err("models: at least one model is required"));
        }
        Ok(&self.models)
    }

    /// SHA-256 of the canonical JSON encoding: keys sorted, so TOML and
    /// JSON spellings of the same config hash alike.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(serde_json::to_string(&v).expect("value serializes").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deserializes with the failing field's path in the message.
fn from_value<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> ConfigResult<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = match (prefix.is_empty(), path == ".") {
            (true, _) => path,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{path}"),
        };
        config_err(format!("{at}: {}", e.into_inner()))
    })
}
