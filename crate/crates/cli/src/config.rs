//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tangentconv::engine::PoolMode;
use tangentconv::network::{Channels, InputSignals, NetworkSpec};
use tangentconv::precompute::{HierarchyConfig, Interpolation};
use tangentconv::train::TrainConfig;

use crate::error::{CliError, ErrorCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Nn,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub base_cell: f64,
    pub r0: f64,
    pub levels: usize,
    pub image_size: usize,
    pub scheme: Scheme,
    pub k: usize,
    pub sigma_factor: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            base_cell: 0.05,
            r0: 0.05,
            levels: 3,
            image_size: 3,
            scheme: Scheme::Nn,
            k: 3,
            sigma_factor: 1.0,
        }
    }
}

impl PlanSection {
    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            base_cell: self.base_cell,
            r0: self.r0,
            levels: self.levels,
            image_size: self.image_size,
            interpolation: match self.scheme {
                Scheme::Nn => Interpolation::Nearest,
                Scheme::Gaussian => Interpolation::Gaussian {
                    k: self.k,
                    sigma_factor: self.sigma_factor,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Signal code such as `"DHN"` or `"DHNRGB"`.
    pub signals: String,
    pub classes: usize,
    pub pool: Pool,
    pub bias: bool,
    pub top_convs: usize,
    pub distance_placeholder: bool,
    pub channels: Channels,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let spec = NetworkSpec::new(InputSignals::default(), 5);
        Self {
            signals: spec.signals.code(),
            classes: spec.classes,
            pool: Pool::Average,
            bias: spec.bias,
            top_convs: spec.top_convs,
            distance_placeholder: spec.distance_placeholder,
            channels: spec.channels,
        }
    }
}

impl NetworkSection {
    pub fn spec(&self) -> Result<NetworkSpec, CliError> {
        let signals = InputSignals::parse(&self.signals).map_err(|e| CliError::new(ErrorCode::Config, e))?;
        let mut spec = NetworkSpec::new(signals, self.classes);
        spec.pool = match self.pool {
            Pool::Average => PoolMode::Average,
            Pool::Max => PoolMode::Max,
        };
        spec.bias = self.bias;
        spec.top_convs = self.top_convs;
        spec.distance_placeholder = self.distance_placeholder;
        spec.channels = self.channels;
        spec.validate().map_err(|e| CliError::new(ErrorCode::Config, e))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub deterministic: bool,
    pub plans: PlanSection,
    pub network: NetworkSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            deterministic: false,
            plans: PlanSection::default(),
            network: NetworkSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::new(ErrorCode::Config, format!("config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new(ErrorCode::Io, format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.plans
            .hierarchy()
            .validate()
            .map_err(|e| CliError::new(ErrorCode::Config, e))?;
        self.network.spec()?;
        self.train.validate().map_err(|e| CliError::new(ErrorCode::Config, e))?;
        if self.plans.levels != tangentconv::network::LEVELS {
            return Err(CliError::new(
                ErrorCode::Config,
                format!("the network needs {} levels, config has {}", tangentconv::network::LEVELS, self.plans.levels),
            ));
        }
        Ok(())
    }
}

/// Overrides shared by every subcommand. `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub scheme: Option<Scheme>,
    pub k: Option<usize>,
    pub signals: Option<String>,
    pub classes: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.deterministic |= self.deterministic;
        if let Some(s) = self.scheme {
            cfg.plans.scheme = s;
        }
        if let Some(k) = self.k {
            cfg.plans.k = k;
        }
        if let Some(s) = &self.signals {
            cfg.network.signals = s.clone();
        }
        if let Some(c) = self.classes {
            cfg.network.classes = c;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        cfg
    }
}

/// Resolve a path given on the command line, failing with a config error if absent.
pub fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::new(ErrorCode::Config, format!("missing {flag}")))
}
