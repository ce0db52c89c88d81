use std::path::{Path, PathBuf};

use clap::Subcommand;
use rwre_core::dp::DpConfig;
use rwre_core::env::{EnvironmentDoc, EnvironmentSpec};
use rwre_core::estimators::PrefactorMode;
use rwre_core::lattice::Direction;
use rwre_core::rng::Seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Exact quenched law of X_n in the seeded environment.
    QuenchedDist,
    /// Annealed law of X_n averaged over an environment ensemble.
    AnnealedDist,
    /// Finite-horizon or Cesàro prefactor on a window.
    Prefactor,
    /// Quenched-versus-annealed box partition distances at fixed times.
    TvPartition,
    /// Quenched-versus-annealed exit laws of a parallelogram.
    ExitDefect,
    /// Distance of the annealed law to the parity-corrected Gaussian.
    Lclt,
    /// Quenched law against annealed law times prefactor.
    PrefactorLclt,
    /// Distances between the intermediate measures.
    IntermediateMeasures,
    /// Regeneration increments, velocity and covariance.
    RegenStats,
    /// Box and point couplings of annealed and quenched laws.
    Coupling,
    /// Merge frequencies of coupled walker pairs.
    PairMerge,
    /// Backtracking probabilities across a grid of slab widths.
    ConditionT,
    /// Non-right exit probability of a single box.
    ConditionP,
}

impl Kind {
    pub fn name(self) -> String {
        serde_json::to_value(self).expect("kind serializes").as_str().expect("string").to_string()
    }
}

/// Experiment parameters; each kind reads the fields it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Box side M.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<u32>,
    /// Environments (K) or Monte Carlo samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<i64>>,
    /// Box scale N or N₀.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<PrefactorMode>>,
    /// Half-width of a prefactor window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign: Option<i8>,
    /// Per-step mean for the Gaussian comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
    /// Per-step covariance for the Gaussian comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Increment bound for the regeneration tail diagnostic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    pub environment: EnvironmentDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Seed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub params: Params,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u128>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub prune: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()) == Some("toml"))
    }

    pub fn parse(text: &str, toml_syntax: bool) -> Result<Self, CliError> {
        if toml_syntax {
            toml::from_str(text).map_err(|e| CliError::Config(format!("config: {}", e.to_string().replace('\n', " "))))
        } else {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
        }
    }

    /// Applies the subcommand and flags, then validates.
    pub fn resolve(mut self, kind: Kind, flags: &Overrides) -> Result<Self, CliError> {
        match self.kind {
            Some(k) if k != kind => {
                return Err(CliError::Config(format!(
                    "config is for {} but the subcommand is {}",
                    k.name(),
                    kind.name()
                )))
            }
            _ => self.kind = Some(kind),
        }
        if let Some(s) = flags.seed {
            self.seed = Some(Seed(s));
        }
        if self.seed.is_none() {
            self.seed = self.environment.seed;
        }
        if flags.threads.is_some() {
            self.threads = flags.threads;
        }
        if flags.out.is_some() {
            self.out = flags.out.clone();
        }
        if flags.prune.is_some() {
            self.prune = flags.prune;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed.is_none() {
            return Err(CliError::Config("a seed is required (config field or --seed)".into()));
        }
        if let Some(p) = self.prune {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(CliError::Config(format!("prune threshold must be a finite value >= 0, got {p}")));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        let p = &self.params;
        let nonempty = [
            ("n_grid", p.n_grid.as_ref().map(Vec::len)),
            ("m_grid", p.m_grid.as_ref().map(Vec::len)),
            ("theta_grid", p.theta_grid.as_ref().map(Vec::len)),
            ("levels", p.levels.as_ref().map(Vec::len)),
            ("modes", p.modes.as_ref().map(Vec::len)),
        ];
        for (name, len) in nonempty {
            if len == Some(0) {
                return Err(CliError::Config(format!("params.{name} must not be empty")));
            }
        }
        self.spec()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<EnvironmentSpec, CliError> {
        let spec = EnvironmentSpec::from_doc(&self.environment).map_err(CliError::Core)?;
        spec.validate().map_err(CliError::Core)?;
        Ok(spec)
    }

    pub fn seed(&self) -> u128 {
        self.seed.expect("validated").0
    }

    pub fn kind(&self) -> Kind {
        self.kind.expect("resolved")
    }

    pub fn dp(&self) -> DpConfig {
        let mut cfg = DpConfig::default();
        cfg.prune = self.prune.unwrap_or(0.0);
        if let Some(m) = self.max_sites {
            cfg.max_sites = m;
        }
        cfg
    }

    pub fn direction(&self, dim: usize) -> Result<Direction, CliError> {
        let axis = self.params.axis.unwrap_or(0);
        let sign = self.params.sign.unwrap_or(1);
        if axis >= dim || !(sign == 1 || sign == -1) {
            return Err(CliError::Config(format!("direction axis {axis} sign {sign} is not valid in d = {dim}")));
        }
        Ok(Direction::new(axis, sign))
    }

    /// SHA-256 of the canonical JSON form without the worker count and output path.
    pub fn hash_hex(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.out = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Config(format!("params.{name} is required for this experiment")))
}
