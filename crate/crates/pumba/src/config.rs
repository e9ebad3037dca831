//! Run configuration. Values come from built-in defaults, then an optional
//! TOML file, then command-line flags, each layer overriding the previous.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_CAPRI_KS, DEFAULT_SUCCESS_KS};
use crate::explain::Z_CUTOFF;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub success_ks: Vec<usize>,
    pub capri_ks: Vec<usize>,
    /// Scores at or above this are predicted native.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            success_ks: DEFAULT_SUCCESS_KS.to_vec(),
            capri_ks: DEFAULT_CAPRI_KS.to_vec(),
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub cutoff: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { cutoff: Z_CUTOFF }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k_list: Option<Vec<usize>>,
    pub threshold: Option<f64>,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Defaults, then `file` if given, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.synthetic.seed = seed;
        }
        if let Some(ks) = &o.k_list {
            self.eval.success_ks = ks.clone();
        }
        if let Some(t) = o.threshold {
            self.eval.threshold = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.eval.success_ks.is_empty() || self.eval.success_ks.contains(&0) {
            return Err(Error::Config("k-list needs positive entries".into()));
        }
        if self.eval.capri_ks.contains(&0) {
            return Err(Error::Config("CAPRI k values must be positive".into()));
        }
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if !(self.explain.cutoff > 0.0) {
            return Err(Error::Config("explain cutoff must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `1,10,25`.
pub fn parse_k_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("`{p}`: {e}"))
                .and_then(|k| if k == 0 { Err("k must be positive".into()) } else { Ok(k) })
        })
        .collect()
}
