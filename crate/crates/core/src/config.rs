//! Deployment config shared by the CLI and the HTTP service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DEFAULT_THRESHOLD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub descriptor: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Where the service also writes rendered PNGs; memory only when unset.
    #[serde(default)]
    pub asset_dir: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            descriptor: None,
            weights: None,
            decoder: None,
            dataset: None,
            asset_dir: None,
            bind: default_bind(),
            port: default_port(),
            threshold: default_threshold(),
        }
    }
}

pub const ENV_DESCRIPTOR: &str = "PERCEPTVIS_DESCRIPTOR";
pub const ENV_WEIGHTS: &str = "PERCEPTVIS_WEIGHTS";
pub const ENV_DECODER: &str = "PERCEPTVIS_DECODER";
pub const ENV_DATASET: &str = "PERCEPTVIS_DATASET";
pub const ENV_ASSET_DIR: &str = "PERCEPTVIS_ASSET_DIR";
pub const ENV_BIND: &str = "PERCEPTVIS_BIND";
pub const ENV_PORT: &str = "PERCEPTVIS_PORT";

impl AppConfig {
    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: AppConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.descriptor,
                &mut cfg.weights,
                &mut cfg.decoder,
                &mut cfg.dataset,
                &mut cfg.asset_dir,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `PERCEPTVIS_*` overrides from `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        for (key, slot) in [
            (ENV_DESCRIPTOR, &mut self.descriptor),
            (ENV_WEIGHTS, &mut self.weights),
            (ENV_DECODER, &mut self.decoder),
            (ENV_DATASET, &mut self.dataset),
            (ENV_ASSET_DIR, &mut self.asset_dir),
        ] {
            if let Some(v) = lookup(key) {
                *slot = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = lookup(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = lookup(ENV_PORT) {
            self.port = v
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_PORT}={v:?} is not a port number")))?;
        }
        Ok(self)
    }

    pub fn with_process_env(self) -> Result<Self> {
        self.with_env(|k| std::env::var(k).ok())
    }

    pub fn require<'a>(&self, field: &'a str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{field} path is not configured")))
    }
}
