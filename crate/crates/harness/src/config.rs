//! Experiment configuration files.

use std::path::{Path, PathBuf};

use rcrl_core::agent::AgentConfig;
use rcrl_core::belief::NamedPrior;
use rcrl_core::envs::{self, layouts, Environment};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

/// Environment variable that replaces `base_seed` when set.
pub const SEED_ENV: &str = "RCRL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Rcrl,
    QlPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Off,
    /// One JSON line per agent step.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// A shipped layout (`bridgecross`, `bridgecross_diagonal`, `pacman`) or
    /// a path to a layout file, relative to the config file.
    pub environment: String,
    #[serde(default = "default_agent")]
    pub agent: AgentKind,
    #[serde(default = "default_prior")]
    pub prior: NamedPrior,
    /// Reward on entering an unsafe state; baseline only.
    #[serde(default)]
    pub penalty: f64,
    #[serde(default = "defaults::phi_max")]
    pub phi_max: f64,
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::c0")]
    pub c0: f64,
    #[serde(default = "defaults::decay")]
    pub decay: f64,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::max_steps")]
    pub max_steps: usize,
    #[serde(default = "defaults::max_episodes")]
    pub max_episodes: usize,
    #[serde(default = "one")]
    pub num_repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Threads for concurrent repeats; all cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub trace_level: TraceLevel,
}

fn default_agent() -> AgentKind {
    AgentKind::Rcrl
}

fn default_prior() -> NamedPrior {
    NamedPrior::Uninformative
}

fn one() -> usize {
    1
}

mod defaults {
    use rcrl_core::agent::AgentConfig;

    macro_rules! from_agent {
        ($($field:ident: $ty:ty),*) => {
            $(pub fn $field() -> $ty { AgentConfig::default().$field })*
        };
    }
    from_agent!(phi_max: f64, m: usize, c0: f64, decay: f64, temperature: f64, mu: f64, gamma: f64, max_steps: usize, max_episodes: usize);
}

impl ExperimentConfig {
    /// Reads a config, applies `key=value` overrides and the seed
    /// environment variable, and validates the result. Relative layout
    /// paths are resolved against the config's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, overrides)?;
        if !is_builtin(&config.environment) {
            let base = path.parent().unwrap_or(Path::new("."));
            config.environment = base.join(&config.environment).display().to_string();
        }
        Ok(config)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
            if let Value::Object(map) = &mut value {
                map.insert("base_seed".into(), seed.into());
            }
        }
        let config: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| HarnessError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_repeats == 0 {
            return Err(HarnessError::Config("num_repeats must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        self.agent_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            mu: self.mu,
            gamma: self.gamma,
            m: self.m,
            phi_max: self.phi_max,
            temperature: self.temperature,
            max_steps: self.max_steps,
            max_episodes: self.max_episodes,
            c0: self.c0,
            decay: self.decay,
        }
    }

    pub fn build_environment(&self) -> Result<Environment> {
        load_environment(&self.environment)
    }
}

fn is_builtin(name: &str) -> bool {
    builtin_layout(name).is_some()
}

fn builtin_layout(name: &str) -> Option<&'static str> {
    match name {
        "bridgecross" => Some(layouts::BRIDGECROSS),
        "bridgecross_diagonal" => Some(layouts::BRIDGECROSS_DIAGONAL),
        "pacman" => Some(layouts::PACMAN),
        _ => None,
    }
}

/// Builds a shipped environment by name, or one from a layout file.
pub fn load_environment(name_or_path: &str) -> Result<Environment> {
    let text = match builtin_layout(name_or_path) {
        Some(text) => text.to_string(),
        None => {
            let path = PathBuf::from(name_or_path);
            std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path, source })?
        }
    };
    envs::from_layout(&text).map_err(|e| HarnessError::Config(format!("{name_or_path}: {e}")))
}

/// `key=value` with a dotted key path; the value is parsed as JSON and
/// falls back to a plain string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut target = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = target
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?}: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        target = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
