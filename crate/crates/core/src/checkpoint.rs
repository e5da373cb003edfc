//! Checkpoint bundle: EMA U-Net weights (used for every evaluation), the raw
//! training weights, the metrics classifier and the noise schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::{Classifier, ClassifierConfig};
use crate::container::{canonical_json, sha256_hex, Container};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::scheduler::{DiffusionSchedule, ScheduleConfig};
use crate::train::TrainConfig;
use crate::unet::{UNetConfig, UNetModel};

pub const CHECKPOINT_KIND: &str = "checkpoint";

pub fn config_hash(config: &UNetConfig) -> Result<String> {
    Ok(sha256_hex(canonical_json(config)?.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    unet_config: UNetConfig,
    config_hash: String,
    schedule: ScheduleConfig,
    classifier_config: Option<ClassifierConfig>,
    train_config: Option<TrainConfig>,
    has_raw: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// EMA weights.
    pub unet: UNetModel,
    /// Raw optimiser weights, kept for resuming.
    pub raw: Option<ParamStore>,
    pub classifier: Option<Classifier>,
    pub schedule: ScheduleConfig,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.schedule.build()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = Meta {
            unet_config: self.unet.config().clone(),
            config_hash: config_hash(self.unet.config())?,
            schedule: self.schedule,
            classifier_config: self.classifier.as_ref().map(|c| c.config().clone()),
            train_config: self.train_config.clone(),
            has_raw: self.raw.is_some(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(&meta)?);
        for (name, t) in self.unet.params().iter() {
            c.push(format!("unet.ema.{name}"), t.clone());
        }
        if let Some(raw) = &self.raw {
            for (name, t) in raw.iter() {
                c.push(format!("unet.raw.{name}"), t.clone());
            }
        }
        if let Some(clf) = &self.classifier {
            for (name, t) in clf.params().iter() {
                c.push(format!("classifier.{name}"), t.clone());
            }
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(&c).map_err(|e| match e {
            Error::Checkpoint { .. } => e,
            other => Error::Checkpoint { path: path.to_path_buf(), message: other.to_string() },
        })
    }

    /// Loads and additionally requires the stored U-Net config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &UNetConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if config_hash(ck.unet.config())? != config_hash(expected)? {
            return Err(Error::Checkpoint { path: path.to_path_buf(), message: "config hash mismatch".into() });
        }
        Ok(ck)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint { path: Default::default(), message: m };
        if c.kind != CHECKPOINT_KIND {
            return Err(bad(format!("expected a {CHECKPOINT_KIND} container, got {:?}", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())?;
        if config_hash(&meta.unet_config)? != meta.config_hash {
            return Err(bad("config hash does not match stored config".into()));
        }
        let mut unet = UNetModel::new(meta.unet_config.clone(), 0)?;
        unet.params_mut().load_named(c.with_prefix("unet.ema."))?;
        unet.set_schedule(&meta.schedule.build()?);
        let raw = if meta.has_raw {
            let mut store = UNetModel::new(meta.unet_config.clone(), 0)?.params().clone();
            store.load_named(c.with_prefix("unet.raw."))?;
            Some(store)
        } else {
            None
        };
        let classifier = match &meta.classifier_config {
            Some(cfg) => {
                let mut clf = Classifier::new(cfg.clone(), 0)?;
                clf.params_mut().load_named(c.with_prefix("classifier."))?;
                Some(clf)
            }
            None => None,
        };
        Ok(Self { unet, raw, classifier, schedule: meta.schedule, train_config: meta.train_config })
    }

    /// Content hash of the serialised checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Hash of a checkpoint file as stored on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Short summary used by listings.
pub fn describe(path: &Path) -> Result<serde_json::Value> {
    let c = Container::read(path)?;
    Ok(json!({
        "kind": c.kind,
        "unet_config": c.meta.get("unet_config"),
        "config_hash": c.meta.get("config_hash"),
        "tensors": c.tensors.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        Checkpoint {
            unet: UNetModel::new(UNetConfig::smoke(), 3).unwrap(),
            raw: Some(UNetModel::new(UNetConfig::smoke(), 4).unwrap().params().clone()),
            classifier: Some(
                Classifier::new(ClassifierConfig { channels: vec![8, 8], ..Default::default() }, 1).unwrap(),
            ),
            schedule: ScheduleConfig::default(),
            train_config: None,
        }
    }

    #[test]
    fn save_load_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = tiny();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.hash().unwrap(), ck.hash().unwrap());
        assert_eq!(file_hash(&path).unwrap(), ck.hash().unwrap());
        for (a, b) in back.unet.params().values().iter().zip(ck.unet.params().values()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn rejects_config_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        tiny().save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, &UNetConfig::smoke()).is_ok());
        assert!(Checkpoint::load_expecting(&path, &UNetConfig::desk()).is_err());

        let mut c = tiny().to_container().unwrap();
        c.meta["config_hash"] = json!("0000");
        c.write(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("config hash"), "{err}");
    }
}
