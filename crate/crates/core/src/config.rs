//! Declarative experiment description shared by every command, with
//! dotted-path overrides and fingerprints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detector::{DetectorConfig, STRIDE};
use crate::error::{Error, Result};
use crate::scenes::{SceneConfig, ShiftParams, SplitRole};
use crate::seeding::mix;
use crate::trainer::{TrainConfig, Variant, VariantFlags};

/// Split sizes and the base seed they are rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_train: usize,
    pub target_train: usize,
    pub target_eval: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_train: 200,
            target_train: 200,
            target_eval: 200,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn size(&self, role: SplitRole) -> usize {
        match role {
            SplitRole::SourceTrain => self.source_train,
            SplitRole::TargetTrain => self.target_train,
            SplitRole::TargetEval => self.target_eval,
        }
    }

    /// Base seed of one split. Splits never share scene seeds.
    pub fn split_seed(&self, role: SplitRole) -> u64 {
        let tag = match role {
            SplitRole::SourceTrain => 1,
            SplitRole::TargetTrain => 2,
            SplitRole::TargetEval => 3,
        };
        mix(self.seed, tag)
    }
}

pub const SPLITS: [SplitRole; 3] = [
    SplitRole::SourceTrain,
    SplitRole::TargetTrain,
    SplitRole::TargetEval,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub scene: SceneConfig,
    pub shift: ShiftParams,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Loss terms enabled by `train`.
    pub variant: VariantFlags,
    pub data: DataConfig,
    /// Seeds of an ablation; `train.seed` drives single runs.
    pub seeds: Vec<u64>,
    /// Arms of an ablation, in table order.
    pub ablation: Vec<Variant>,
    /// Adds the oracle arm, trained on labeled target-train images.
    pub oracle: bool,
    pub out_dir: PathBuf,
}

/// Training schedule used by experiments: a faster pretrain followed by
/// adaptation at the base learning rate.
pub fn experiment_train_config() -> TrainConfig {
    TrainConfig {
        pretrain_lr: Some(0.005),
        iters_pretrain: 3000,
        iters_align: 1000,
        iters_full: 1000,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            scene: SceneConfig::default(),
            shift: ShiftParams::default_target(),
            detector: DetectorConfig::default(),
            train: experiment_train_config(),
            variant: Variant::Full.flags(),
            data: DataConfig::default(),
            seeds: vec![0, 1, 2],
            ablation: Variant::ALL.to_vec(),
            oracle: true,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn sha_hex<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&json))
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => {
                        return Err(Error::Config(format!("unknown configuration key {sub:?}")))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate(STRIDE)?;
        self.shift.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        self.variant.validate()?;
        if self.scene.image_size != self.detector.image_size {
            return Err(Error::Config(format!(
                "scene.image_size {} differs from detector.image_size {}",
                self.scene.image_size, self.detector.image_size
            )));
        }
        if self.scene.num_fg_classes != self.detector.num_fg_classes {
            return Err(Error::Config(format!(
                "scene.num_fg_classes {} differs from detector.num_fg_classes {}",
                self.scene.num_fg_classes, self.detector.num_fg_classes
            )));
        }
        if self.data.source_train == 0 || self.data.target_eval == 0 {
            return Err(Error::Config(
                "source_train and target_eval need at least one image".into(),
            ));
        }
        if self.data.target_train == 0
            && (self.variant.aligns() || self.variant.cst || self.variant.mcd)
        {
            return Err(Error::Config(
                "adaptation terms need at least one target_train image".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.ablation.is_empty() {
            return Err(Error::Config(
                "ablation must list at least one variant".into(),
            ));
        }
        Ok(())
    }

    /// Hash of everything that determines the generated datasets.
    pub fn dataset_fingerprint(&self) -> String {
        sha_hex(&(&self.scene, &self.shift, &self.data))
    }

    /// Hash of the whole experiment except its output location.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        sha_hex(&canonical)
    }

    /// Builds a spec from a partial document: every field it names replaces
    /// the corresponding default, at any depth.
    pub fn from_partial(doc: Value) -> Result<Self> {
        let mut root = serde_json::to_value(ExperimentSpec::default()).expect("spec serializes");
        merge(&mut root, doc, "")?;
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one field by dotted path, e.g. `train.lr` = `0.01`. The value is
    /// read as JSON when it parses, otherwise as a string.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("spec serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?,
                _ => {
                    return Err(Error::Config(format!(
                        "{key:?} does not name a configuration field"
                    )))
                }
            };
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// Parses and applies a `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.apply_override(key.trim(), value.trim())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn split_dir(&self, role: SplitRole) -> PathBuf {
        self.data_dir().join(role.dir_name())
    }

    pub fn run_dir(&self, variant: &str, seed: u64) -> PathBuf {
        self.out_dir
            .join("runs")
            .join(format!("{variant}_seed{seed}"))
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.out_dir.join("ablation")
    }

    /// Name of the enabled loss-term combination, if it is one of the arms.
    pub fn variant_name(&self) -> Option<&'static str> {
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == self.variant)
            .map(Variant::name)
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = dir.to_path_buf();
        self
    }
}
