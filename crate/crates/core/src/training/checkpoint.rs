use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::weights::{self, TensorMap};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

/// Model weights plus the facts needed to rebuild and audit them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub epoch: usize,
    pub val_f1: f64,
    pub train_f1: f64,
    /// Fingerprint of the configuration that produced the weights.
    pub fingerprint: String,
    pub state: TensorMap,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize, train_f1: f64, val_f1: f64, fingerprint: &str) -> Self {
        Checkpoint {
            model: model.config().clone(),
            epoch,
            val_f1,
            train_f1,
            fingerprint: fingerprint.to_string(),
            state: model.state_dict(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BTreeMap::from([
            ("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string()),
            ("model_config".to_string(), serde_json::to_string(&self.model)?),
            ("epoch".to_string(), self.epoch.to_string()),
            ("val_f1".to_string(), format!("{:?}", self.val_f1)),
            ("train_f1".to_string(), format!("{:?}", self.train_f1)),
            ("fingerprint".to_string(), self.fingerprint.clone()),
        ]);
        weights::write(path, &self.state, &meta)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (state, meta) = weights::read(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing '{k}'", path.display())))
        };
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version}, expected {CHECKPOINT_FORMAT_VERSION}",
                path.display()
            )));
        }
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("unreadable '{k}'")))
        };
        Ok(Checkpoint {
            model: serde_json::from_str(field("model_config")?)?,
            epoch: num("epoch")? as usize,
            val_f1: num("val_f1")?,
            train_f1: num("train_f1")?,
            fingerprint: field("fingerprint")?.clone(),
            state,
        })
    }

    /// Rebuilds the model and loads the stored weights. Pretrained imports
    /// are skipped since the stored state replaces them.
    pub fn restore(&self) -> Result<Model> {
        let config = ModelConfig {
            pretrained: false,
            ..self.model.clone()
        };
        let mut model = Model::build(&config, 0)?;
        model.load_state_dict(&self.state)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random4;

    #[test]
    fn save_load_restore() {
        let cfg = ModelConfig {
            tiny_width: 6,
            ..ModelConfig::tiny()
        };
        let model = Model::build(&cfg, 4).unwrap();
        let ck = Checkpoint::capture(&model, 7, 0.91, 0.1 + 0.2, "abc");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x = random4((2, 3, 16, 16), 0);
        assert_eq!(back.restore().unwrap().infer(&x).unwrap(), model.infer(&x).unwrap());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = ModelConfig::tiny();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        b.se_reduction = 8;
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        assert_eq!(fingerprint(&a).unwrap().len(), 64);
    }
}
