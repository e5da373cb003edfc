use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Service settings: one TOML file, then `SKIPFORGE_*` environment overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Run folders, the run index and uploaded images live here.
    pub store_root: PathBuf,
    /// Directory scanned for `*.ckpt` files.
    pub checkpoint_dir: PathBuf,
    /// Used when a submission does not name a checkpoint.
    pub default_checkpoint: Option<String>,
    /// Jobs allowed to run at once.
    pub workers: usize,
    /// Threads used inside a single sweep job.
    pub sweep_workers: usize,
    /// Built UI bundle, served at `/` when present.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            store_root: PathBuf::from("runs"),
            checkpoint_dir: PathBuf::from("fixtures"),
            default_checkpoint: None,
            workers: 1,
            sweep_workers: 1,
            static_dir: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (if any) and applies the process environment on top.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ServiceError> {
            v.parse().map_err(|_| ServiceError::Config(format!("{key}={v:?} is not valid")))
        }
        if let Some(v) = var("SKIPFORGE_BIND") {
            self.bind = parse("SKIPFORGE_BIND", &v)?;
        }
        if let Some(v) = var("SKIPFORGE_PORT") {
            self.port = parse("SKIPFORGE_PORT", &v)?;
        }
        if let Some(v) = var("SKIPFORGE_STORE_ROOT") {
            self.store_root = v.into();
        }
        if let Some(v) = var("SKIPFORGE_CHECKPOINT_DIR") {
            self.checkpoint_dir = v.into();
        }
        if let Some(v) = var("SKIPFORGE_DEFAULT_CHECKPOINT") {
            self.default_checkpoint = Some(v);
        }
        if let Some(v) = var("SKIPFORGE_WORKERS") {
            self.workers = parse("SKIPFORGE_WORKERS", &v)?;
        }
        if let Some(v) = var("SKIPFORGE_STATIC_DIR") {
            self.static_dir = Some(v.into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 || self.sweep_workers == 0 {
            return Err(ServiceError::Config("workers and sweep_workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file_values() {
        let mut cfg: ServiceConfig = toml::from_str("port = 9000\nstore_root = \"/srv/runs\"").unwrap();
        assert_eq!(cfg.port, 9000);
        cfg.apply_env(|k| match k {
            "SKIPFORGE_PORT" => Some("9100".into()),
            "SKIPFORGE_CHECKPOINT_DIR" => Some("/ckpt".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.store_root, PathBuf::from("/srv/runs"));
        assert_eq!(cfg.checkpoint_dir, PathBuf::from("/ckpt"));
    }

    #[test]
    fn bad_values_are_reported() {
        let mut cfg = ServiceConfig::default();
        assert!(cfg.apply_env(|k| (k == "SKIPFORGE_PORT").then(|| "eighty".into())).is_err());
        assert!(toml::from_str::<ServiceConfig>("prot = 1").is_err());
        assert!(ServiceConfig { workers: 0, ..Default::default() }.validate().is_err());
    }
}
