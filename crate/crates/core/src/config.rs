//! Run configuration: one TOML file, overridable by environment variables
//! and command-line flags (flags > environment > file > defaults).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{FreshnessPolicy, Pipeline};
use crate::embedding::embedder_by_name;
use crate::impedance::GainScheduler;
use crate::kinematics::{ArmModel, IkOptions};
use crate::perception::{MockVlm, NormalizationTable, VlmClient};
use crate::retrieval::{RetrievalConfig, ScenarioIndex};
use crate::safety::SafetyLimits;
use crate::scenario_db::{load_database, ScenarioDatabase};
use crate::sim::{SimConfig, SimContext};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid setting {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("loading {what}: {message}")]
    Asset { what: &'static str, message: String },
}

/// Data files; `None` selects the bundled default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub db: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub normalization: Option<PathBuf>,
    pub mock_scenes: Option<PathBuf>,
    /// Directory searched for `<name>.toml` scripts before the bundled ones.
    pub scripts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommsConfig {
    pub host: String,
    pub port: u16,
    pub policy: FreshnessPolicy,
    /// Gain transition time, s.
    pub slew: f64,
    /// Artificial per-query server delay, s.
    pub server_latency: f64,
}

impl Default for CommsConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7878,
            policy: FreshnessPolicy::default(),
            slew: GainScheduler::DEFAULT_SLEW,
            server_latency: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// `hash` or `remote`.
    pub kind: String,
    pub endpoint: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: "hash".into(),
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub safety: SafetyLimits,
    pub comms: CommsConfig,
    pub embedder: EmbedderConfig,
    pub sim: SimConfig,
    pub seed: u64,
}

/// Environment variables read by [`RunConfig::apply_env`].
pub const ENV_STREAM_RATE: &str = "SAFEHUMANOID_STREAM_RATE";
pub const ENV_STALENESS_TIMEOUT: &str = "SAFEHUMANOID_STALENESS_TIMEOUT";
pub const ENV_CONTROL_RATE: &str = "SAFEHUMANOID_CONTROL_RATE";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })
    }

    /// Reads a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(dir) = path.parent() {
            let p = &mut cfg.paths;
            for slot in [
                &mut p.db,
                &mut p.model,
                &mut p.normalization,
                &mut p.mock_scenes,
                &mut p.scripts,
            ] {
                if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                    *slot = Some(dir.join(rel));
                }
            }
        }
        Ok(cfg)
    }

    /// Applies rate and timeout overrides from the environment.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env_from(|k| std::env::var(k).ok())
    }

    pub fn apply_env_from(
        &mut self,
        get: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        let policy = &mut self.comms.policy;
        for (key, slot) in [
            (ENV_STREAM_RATE, &mut policy.stream_rate),
            (ENV_STALENESS_TIMEOUT, &mut policy.staleness_timeout),
            (ENV_CONTROL_RATE, &mut policy.control_rate),
        ] {
            if let Some(raw) = get(key) {
                *slot = raw.trim().parse().map_err(|_| ConfigError::Invalid {
                    key: key.into(),
                    message: format!("`{raw}` is not a number"),
                })?;
            }
        }
        Ok(())
    }

    /// Range checks and existence of every referenced file.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::Invalid {
            key: key.into(),
            message,
        };
        self.retrieval
            .validate()
            .map_err(|e| invalid("retrieval", e.to_string()))?;
        self.safety
            .validate()
            .map_err(|e| invalid("safety", e.to_string()))?;
        self.comms
            .policy
            .validate()
            .map_err(|m| invalid("comms.policy", m))?;
        if !(self.comms.slew >= 0.0 && self.comms.slew.is_finite()) {
            return Err(invalid(
                "comms.slew",
                format!("{} must be >= 0", self.comms.slew),
            ));
        }
        if !(self.comms.server_latency >= 0.0 && self.comms.server_latency.is_finite()) {
            return Err(invalid("comms.server_latency", "must be >= 0".into()));
        }
        let dt = 1.0 / self.comms.policy.control_rate;
        if (self.sim.dt - dt).abs() > 1e-12 {
            return Err(invalid(
                "sim.dt",
                format!("{} does not match the control rate ({dt} s)", self.sim.dt),
            ));
        }
        if !(self.sim.friction >= 0.0)
            || !(self.sim.measurement_noise >= 0.0)
            || !(self.sim.time_scale > 0.0)
        {
            return Err(invalid(
                "sim",
                "friction and noise must be >= 0, time_scale > 0".into(),
            ));
        }
        let s = &self.sim.speeds;
        if !(0.0 < s.slow && s.slow <= s.mid && s.mid <= s.normal) {
            return Err(invalid(
                "sim.speeds",
                "expected 0 < slow <= mid <= normal".into(),
            ));
        }
        if !matches!(self.embedder.kind.as_str(), "hash" | "remote") {
            return Err(invalid(
                "embedder.kind",
                format!("unknown embedder `{}`", self.embedder.kind),
            ));
        }
        let p = &self.paths;
        for (key, path) in [
            ("paths.db", &p.db),
            ("paths.model", &p.model),
            ("paths.normalization", &p.normalization),
            ("paths.mock_scenes", &p.mock_scenes),
            ("paths.scripts", &p.scripts),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(invalid(key, format!("{} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn sim_context(&self, model: ArmModel) -> SimContext {
        SimContext {
            model,
            policy: self.comms.policy,
            limits: self.safety,
            slew: self.comms.slew,
            sim: self.sim,
            ik: IkOptions::default(),
            seed: self.seed,
        }
    }

    /// Resolves a script argument: an existing file path, then
    /// `<scripts>/<name>.toml`, then a bundled script.
    pub fn resolve_script(
        &self,
        name_or_path: &str,
    ) -> Result<crate::sim::ScenarioScript, ConfigError> {
        let asset = |e: crate::sim::SimError| ConfigError::Asset {
            what: "script",
            message: e.to_string(),
        };
        let direct = Path::new(name_or_path);
        if direct.is_file() {
            return crate::sim::ScenarioScript::load(direct).map_err(asset);
        }
        if let Some(dir) = &self.paths.scripts {
            let candidate = dir.join(format!("{name_or_path}.toml"));
            if candidate.is_file() {
                return crate::sim::ScenarioScript::load(candidate).map_err(asset);
            }
        }
        crate::data::script(name_or_path).ok_or_else(|| ConfigError::Asset {
            what: "script",
            message: format!("no script named `{name_or_path}`"),
        })
    }
}

/// Data loaded according to a configuration.
pub struct Assets {
    pub db: Arc<ScenarioDatabase>,
    pub model: ArmModel,
    pub normalization: Arc<NormalizationTable>,
    pub vlm: MockVlm,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Assets {
    pub fn load(cfg: &RunConfig) -> Result<Self, ConfigError> {
        let asset = |what: &'static str| move |e: String| ConfigError::Asset { what, message: e };
        let db = match &cfg.paths.db {
            Some(p) => load_database(p).map_err(|e| asset("database")(e.to_string()))?,
            None => crate::data::seed_database(),
        };
        let model = match &cfg.paths.model {
            Some(p) => {
                ArmModel::from_toml(&read(p)?).map_err(|e| asset("arm model")(e.to_string()))?
            }
            None => crate::data::arm_model(),
        };
        let normalization = match &cfg.paths.normalization {
            Some(p) => NormalizationTable::from_json(&read(p)?)
                .map_err(|e| asset("normalization table")(e.to_string()))?,
            None => crate::data::normalization_table().clone(),
        };
        let vlm = match &cfg.paths.mock_scenes {
            Some(p) => {
                MockVlm::from_json(&read(p)?).map_err(|e| asset("mock scenes")(e.to_string()))?
            }
            None => crate::data::mock_vlm(),
        };
        Ok(Self {
            db: Arc::new(db),
            model,
            normalization: Arc::new(normalization),
            vlm,
        })
    }

    /// Builds the server pipeline over these assets.
    pub fn pipeline(&self, cfg: &RunConfig) -> Result<Pipeline, ConfigError> {
        let embedder = embedder_by_name(&cfg.embedder.kind, cfg.embedder.endpoint.as_deref())
            .map_err(|e| ConfigError::Asset {
                what: "embedder",
                message: e.to_string(),
            })?;
        let index = ScenarioIndex::build(Arc::clone(&self.db), embedder.as_ref()).map_err(|e| {
            ConfigError::Asset {
                what: "index",
                message: e.to_string(),
            }
        })?;
        let vlm: Arc<dyn VlmClient> = Arc::new(self.vlm.clone());
        Ok(Pipeline {
            vlm,
            embedder: Arc::from(embedder),
            normalization: Arc::clone(&self.normalization),
            index,
            retrieval: cfg.retrieval,
            limits: cfg.safety,
        })
    }
}
