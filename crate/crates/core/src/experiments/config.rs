use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datasets::{load_idx, make_synthetic_ring, LabeledDataset, UnlearnSpec};
use crate::error::{Error, Result};
use crate::inversion::{InitPolicy, InversionConfig};
use crate::models::ArchConfig;
use crate::rng::derive_seed;
use crate::training::TrainConfig;
use crate::unlearning::UnlearnConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// IDX image files (optionally gzipped); relative paths resolve against
    /// the config file's directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Gaussian blobs on a circle, one class per blob.
    Ring {
        n_modes: usize,
        per_mode: usize,
        test_per_mode: usize,
        radius: f64,
        noise_sigma: f64,
    },
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
                Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?))
            }
            DatasetConfig::Ring { n_modes, per_mode, test_per_mode, radius, noise_sigma } => Ok((
                make_synthetic_ring(*n_modes, *per_mode, *radius, *noise_sigma, derive_seed(seed, "data/train"))?,
                make_synthetic_ring(*n_modes, *test_per_mode, *radius, *noise_sigma, derive_seed(seed, "data/test"))?,
            )),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } = self {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = lexical_normalize(&base.join(&*p));
                }
            }
        }
    }

    pub fn is_vector(&self) -> bool {
        matches!(self, DatasetConfig::Ring { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Raw coordinates for vector data, classifier features for images.
    Auto,
    Classifier,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Reference images per class inverted to estimate the latent means
    /// (capped by what the class has).
    pub per_class: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { per_class: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub fid_samples: usize,
    pub acc_per_class: usize,
    pub features: FeatureSource,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { fid_samples: 1000, acc_per_class: 100, features: FeatureSource::Auto }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub enabled: bool,
    /// Samples per class row in the image grids.
    pub grid_columns: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { enabled: true, grid_columns: 8 }
    }
}

fn default_classifier() -> TrainConfig {
    TrainConfig { steps: 1500, ..TrainConfig::default() }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment. Stage seeds inside the blocks are ignored: [`resolve`]
/// derives every one of them from `seed` (and `replicate` for the split and
/// unlearning stages), so only the global seed needs recording.
///
/// [`resolve`]: ExperimentConfig::resolve
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Repeats the split and unlearning stages with fresh seeds while
    /// reusing the pretrained models.
    #[serde(default)]
    pub replicate: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// Defaults to the preset matching the dataset.
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_classifier")]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    pub unlearn_target: UnlearnSpec,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Also retrain from scratch on the learning set.
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub plots: PlotConfig,
}

impl ExperimentConfig {
    /// Parses a config file; relative dataset and output paths resolve against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let mut value: Value = serde_json::from_slice(&std::fs::read(path)?)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new(".")))?;
        cfg.dataset.resolve_paths(&base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = lexical_normalize(&base.join(&cfg.output_dir));
        }
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arch_or_default(&self, num_classes: usize) -> ArchConfig {
        match (&self.arch, &self.dataset) {
            (Some(a), _) => a.clone(),
            (None, DatasetConfig::Ring { .. }) => ArchConfig::ring(num_classes),
            (None, DatasetConfig::Idx { .. }) => ArchConfig::desk_digits(),
        }
    }

    /// Fills in the architecture and overwrites every stage seed with its
    /// derivation from the global seed.
    pub fn resolve(&self, num_classes: usize) -> Self {
        let mut c = self.clone();
        c.arch = Some(self.arch_or_default(num_classes));
        c.train.seed = derive_seed(self.seed, "train");
        c.classifier.seed = derive_seed(self.seed, "classifier");
        c.inversion.seed = derive_seed(self.seed, "inversion");
        let rep = self.replicate;
        c.unlearn_target.selection_seed = derive_seed(self.seed, &format!("split/{rep}"));
        c.unlearn.seed = derive_seed(self.seed, &format!("unlearn/{rep}"));
        c
    }

    pub fn baseline_train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, &format!("baseline/{}", self.replicate)), ..self.train.clone() }
    }

    pub fn evaluation_seed(&self) -> u64 {
        derive_seed(self.seed, "evaluate")
    }

    pub fn plot_seed(&self) -> u64 {
        derive_seed(self.seed, "plots")
    }

    pub fn uses_identity_features(&self) -> bool {
        match self.evaluation.features {
            FeatureSource::Auto => self.dataset.is_vector(),
            FeatureSource::Identity => true,
            FeatureSource::Classifier => false,
        }
    }

    /// Cross-block checks against the loaded training data; nothing is
    /// written before these pass.
    pub fn validate(&self, train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name must be a non-empty single path component".into()));
        }
        if let DatasetConfig::Ring { radius, noise_sigma, .. } = self.dataset {
            if radius + 3.0 * noise_sigma > 1.0 {
                return Err(Error::Config("ring radius + 3 sigma must stay within the generator's [-1, 1] output range".into()));
            }
        }
        let arch = self.arch_or_default(train.num_classes());
        arch.validate()?;
        if arch.num_classes != train.num_classes() || test.num_classes() != train.num_classes() {
            return Err(Error::Config(format!(
                "architecture has {} classes, training data {}, test data {}",
                arch.num_classes,
                train.num_classes(),
                test.num_classes()
            )));
        }
        if arch.data_shape != train.shape() || test.shape() != train.shape() {
            return Err(Error::Config(format!(
                "architecture expects samples of shape {:?}, data has {:?}",
                arch.data_shape,
                train.shape()
            )));
        }
        self.unlearn_target.validate(train).map_err(|e| Error::Config(e.to_string()))?;
        self.unlearn.validate(self.unlearn_target.is_class())?;
        self.train.validate()?;
        self.classifier.validate()?;
        self.inversion.validate()?;
        if self.inversion.init == InitPolicy::Provided {
            return Err(Error::Config("the pipeline cannot use provided inversion starting codes".into()));
        }
        if self.stats.per_class == 0 || self.evaluation.fid_samples < 2 || self.evaluation.acc_per_class == 0 {
            return Err(Error::Config("stats.per_class, evaluation.fid_samples (>= 2) and evaluation.acc_per_class must be positive".into()));
        }
        if self.plots.grid_columns == 0 {
            return Err(Error::Config("plots.grid_columns must be positive".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path `{path}` has an empty segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Hex sha256 of a value's canonical JSON (serde_json maps are sorted).
pub fn content_hash(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Drops `.` components and folds `..` into its parent without touching the
/// filesystem.
pub(crate) fn lexical_normalize(path: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        let mut v = json!({"unlearn": {"f_label": 0.1}});
        apply_override(&mut v, "unlearn.f_label=-1").unwrap();
        apply_override(&mut v, "unlearn.mechanism=truncation").unwrap();
        apply_override(&mut v, "evaluation.fid_samples=50").unwrap();
        assert_eq!(v["unlearn"]["f_label"], json!(-1));
        assert_eq!(v["unlearn"]["mechanism"], json!("truncation"));
        assert_eq!(v["evaluation"]["fid_samples"], json!(50));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "unlearn.f_label.x=1").is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(content_hash(&a), content_hash(&b));
    }
}
