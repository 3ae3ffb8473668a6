use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelConfig;
use super::optim::OptimConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::scenegen::SceneConfig;
use crate::setloss::{KdConfig, LossConfig};

/// Environment variable that replaces `root` from the config file.
pub const ROOT_ENV: &str = "LIDET_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub split: String,
    pub val_split: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed optimizer step count; replaces `epochs` when set.
    pub steps: Option<usize>,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Steps between validation runs; 0 disables them.
    pub eval_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            split: "train".into(),
            val_split: "val".into(),
            epochs: 5,
            batch_size: 2,
            steps: None,
            checkpoint_every: 0,
            eval_every: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Detections kept per scene, ranked by class score, no suppression.
    pub topk: usize,
    /// `predict` drops detections scoring below this.
    pub report_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { topk: 300, report_floor: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root; relative paths resolve against the config file's directory.
    pub root: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Scene count per split for `gen`.
    pub splits: BTreeMap<String, usize>,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub kd: KdConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("runs/default"),
            splits: BTreeMap::from([("train".into(), 200), ("val".into(), 50)]),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            kd: KdConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Reads, resolves relative paths, applies the root override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.root = base.join(&cfg.root);
        cfg.checkpoint_dir = base.join(&cfg.checkpoint_dir);
        if let Some(root) = std::env::var_os(ROOT_ENV) {
            cfg.root = PathBuf::from(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn class_names(&self) -> Vec<String> {
        self.scene.class_names()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.model.backbone.grid.range != self.scene.range {
            return Err(Error::Config("model grid range differs from the scene range".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.inference.topk == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        if self.scene.max_objects > self.model.decoder.num_queries {
            return Err(Error::Config(format!(
                "{} queries cannot cover up to {} objects per scene",
                self.model.decoder.num_queries, self.scene.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.kd.score_floor) || self.kd.lambda_kd < 0.0 {
            return Err(Error::Config(format!("invalid distillation settings {:?}", self.kd)));
        }
        Ok(())
    }

    /// SHA-256 of the architecture-defining settings.
    pub fn model_hash(&self) -> [u8; 32] {
        model_hash(&self.model, self.class_names().len())
    }
}

pub fn model_hash(model: &ModelConfig, num_classes: usize) -> [u8; 32] {
    let text = serde_json::to_string(&(model, num_classes)).expect("model config serialises");
    Sha256::digest(text.as_bytes()).into()
}
