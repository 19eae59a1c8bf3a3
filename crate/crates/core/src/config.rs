//! Experiment configuration: everything a training run needs, in one TOML
//! file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_sample, ClassMap, DatasetManifest};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::io::load_sample;
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::preprocess::{prepare_volume, PreprocessConfig};
use crate::trainer::{TrainConfig, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub classes: ClassMap,
    /// Dataset manifest paths, relative to the config file.
    pub datasets: Vec<PathBuf>,
    /// Leave out volumes assigned to this fold in their manifest.
    #[serde(default)]
    pub holdout_fold: Option<usize>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut config.datasets {
            *d = base.join(&*d);
        }
        config.output_dir = base.join(&config.output_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("datasets: at least one manifest is required".into()));
        }
        if let Some(missing) = self.datasets.iter().find(|p| !p.is_file()) {
            return Err(Error::Config(format!("datasets: manifest {} does not exist", missing.display())));
        }
        self.preprocess.validate()?;
        self.network.validate()?;
        self.loss.validate(self.network.class_count)?;
        self.train.validate()?;
        if self.network.class_count != self.classes.len() {
            return Err(Error::Config(format!(
                "network.class_count {} differs from {} classes",
                self.network.class_count,
                self.classes.len()
            )));
        }
        if self.network.scales != self.preprocess.scales {
            return Err(Error::Config(format!(
                "network.scales {} differs from preprocess.scales {}",
                self.network.scales, self.preprocess.scales
            )));
        }
        if self.network.input_channels != self.preprocess.stack_depth {
            return Err(Error::Config(format!(
                "network.input_channels {} differs from preprocess.stack_depth {}",
                self.network.input_channels, self.preprocess.stack_depth
            )));
        }
        Ok(())
    }

    pub fn manifests(&self) -> Result<Vec<DatasetManifest>> {
        self.datasets.iter().map(|p| DatasetManifest::load(p)).collect()
    }

    /// Loads, validates and preprocesses every training volume.
    pub fn load_training_sets(&self) -> Result<Vec<TrainingSet>> {
        let mut sets = Vec::new();
        for manifest in self.manifests()? {
            let descriptor = Arc::new(manifest.descriptor(&self.classes)?);
            let mut volumes = Vec::new();
            for index in 0..descriptor.volume_refs().len() {
                let held_out = matches!(
                    (self.holdout_fold, descriptor.split_assignments()),
                    (Some(h), Some(folds)) if folds[index] == h
                );
                if held_out {
                    continue;
                }
                let sample = load_sample(&descriptor, index)?;
                let report = validate_sample(&sample, &descriptor);
                if let Some(v) = report.violations.first() {
                    return Err(Error::Config(format!("volume `{}`: {v}", sample.id)));
                }
                volumes.push(prepare_volume(&sample, &self.preprocess)?);
            }
            sets.push(TrainingSet { descriptor, volumes });
        }
        Ok(sets)
    }
}
