//! Service configuration: a TOML file with environment-variable overrides.
//!
//! ```toml
//! port = 8080            # PIXGUIDE_PORT
//! root = "workspace"     # PIXGUIDE_ROOT
//! workers = 4            # PIXGUIDE_WORKERS (0 = number of CPUs)
//! previews = 5           # preview thumbnails per candidate
//! policy = "toy"         # "toy" or "hires" automatic-parameter presets
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pixguide::edit::ParamPolicy;
use pixguide::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Toy,
    Hires,
}

impl PolicyName {
    pub fn policy(&self) -> ParamPolicy {
        match self {
            PolicyName::Toy => ParamPolicy::toy(),
            PolicyName::Hires => ParamPolicy::hires(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub port: u16,
    pub root: PathBuf,
    pub workers: usize,
    pub previews: usize,
    pub policy: PolicyName,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            port: 8080,
            root: PathBuf::from("workspace"),
            workers: 0,
            previews: 5,
            policy: PolicyName::Toy,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    /// Reads `path` (when given) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => Config::default(),
        };
        cfg.with_env(|k| std::env::var(k).ok())
    }

    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}={v} is not valid")))
        }
        if let Some(v) = get("PIXGUIDE_PORT") {
            self.port = parse("PIXGUIDE_PORT", v)?;
        }
        if let Some(v) = get("PIXGUIDE_ROOT") {
            self.root = PathBuf::from(v);
        }
        if let Some(v) = get("PIXGUIDE_WORKERS") {
            self.workers = parse("PIXGUIDE_WORKERS", v)?;
        }
        Ok(self)
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }
}
