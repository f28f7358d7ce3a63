//! JSON run configuration: dataset selection, pretraining, probes and output root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::ImageBatch;
use crate::data::{self, ContentStyleSpec};
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Inferred as `max label + 1` when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(ContentStyleSpec),
    Idx(IdxFiles),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(ContentStyleSpec::default())
    }
}

/// Train and test images with labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub train: ImageBatch,
    pub test: ImageBatch,
    pub classes: usize,
}

impl DatasetConfig {
    /// Generates or reads the data. Relative IDX paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic(spec) => {
                let (train, test) = data::generate_split(spec)?;
                Ok(Dataset {
                    name: format!("synthetic-s{}", spec.seed),
                    train,
                    test,
                    classes: spec.num_classes,
                })
            }
            DatasetConfig::Idx(files) => {
                let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                let train = data::load_idx(&at(&files.train_images), &at(&files.train_labels))?;
                let test = data::load_idx(&at(&files.test_images), &at(&files.test_labels))?;
                if train.shape() != test.shape() {
                    return Err(Error::Config("train and test IDX images differ in shape".into()));
                }
                let max_label = train
                    .labels()
                    .into_iter()
                    .chain(test.labels())
                    .flat_map(|l| l.iter().copied())
                    .max()
                    .unwrap_or(0);
                let classes = files.num_classes.unwrap_or(max_label + 1);
                if max_label >= classes {
                    return Err(Error::LabelMismatch(format!("label {max_label} with num_classes = {classes}")));
                }
                Ok(Dataset {
                    name: format!("idx:{}", files.train_images.display()),
                    train,
                    test,
                    classes,
                })
            }
        }
    }
}

fn default_monitor() -> usize {
    128
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one `pretrain`/`probe`/`eval` invocation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub probes: Vec<ProbeConfig>,
    /// Held-out images used for the per-epoch effective-rank column.
    #[serde(default = "default_monitor")]
    pub monitor_size: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            let view = self.train.augment.out_shape(spec.shape).dim();
            if view != self.train.encoder.input_dim {
                return Err(Error::Config(format!(
                    "encoder input_dim {} does not match view size {view}",
                    self.train.encoder.input_dim
                )));
            }
        }
        self.train.validate()?;
        self.probes.iter().try_for_each(ProbeConfig::validate)
    }

    /// Makes `seed` the root of every random stream in the run.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        for p in &mut self.probes {
            p.seed = seed;
        }
    }

    /// The first `monitor_size` test images.
    pub fn monitor(&self, data: &Dataset) -> Option<ImageBatch> {
        let n = self.monitor_size.min(data.test.len());
        (n >= 2).then(|| data.test.range(0, n))
    }
}
