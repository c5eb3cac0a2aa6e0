//! The TOML experiment configuration and its cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::CertifyConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::training::FitOptions;
use crate::models::{AeConfig, ClassifierConfig, RdUnetConfig};
use crate::zo::{TrainSchedule, ZoConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        image_size: usize,
        channels: usize,
        train_per_class: usize,
        test_per_class: usize,
        /// Defaults to the root seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first examples of each split.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierConfig,
    pub target_training: FitOptions,
    pub denoiser: RdUnetConfig,
    pub autoencoder: AeConfig,
    pub autoencoder_pretraining: FitOptions,
    pub zo: ZoConfig,
    pub loss: LossWeights,
    pub schedule: TrainSchedule,
    pub certify: CertifyConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            Error::parse(offset, e.message().to_string())
        })
    }

    /// Reads, overrides and validates a configuration file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(vec![format!("config {}: {e}", path.display())])
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// The configuration as it was actually run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.classifier.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    /// Every problem, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        self.classifier.validate("classifier", &mut p);
        self.target_training.validate("target_training", &mut p);
        self.denoiser.validate("denoiser", &mut p);
        self.autoencoder.validate("autoencoder", &mut p);
        self.autoencoder_pretraining.validate("autoencoder_pretraining", &mut p);
        self.zo.validate("zo", &mut p);
        self.loss.validate("loss", &mut p);
        self.schedule.validate("schedule", &mut p);
        self.certify.validate("certify", &mut p);
        if self.out_dir.as_os_str().is_empty() {
            p.push("out_dir must not be empty".into());
        }

        let [c, h, _] = self.classifier.input_shape();
        let mut same = |name: &str, channels: usize, size: usize| {
            if channels != c {
                p.push(format!("{name}.input_channels = {channels} but classifier.input_channels = {c}"));
            }
            if size != h {
                p.push(format!("{name}.image_size = {size} but classifier.image_size = {h}"));
            }
        };
        same("denoiser", self.denoiser.input_channels, self.denoiser.image_size);
        same("autoencoder", self.autoencoder.input_channels, self.autoencoder.image_size);

        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                image_size,
                channels,
                train_per_class,
                test_per_class,
                ..
            } => {
                same_dataset(&mut p, *classes, *image_size, *channels, &self.classifier);
                if *classes < 2 || *classes > crate::data::PATTERN_COUNT {
                    p.push(format!(
                        "dataset.classes = {classes} must be in 2..={}",
                        crate::data::PATTERN_COUNT
                    ));
                }
                if *image_size < 8 {
                    p.push(format!("dataset.image_size = {image_size} must be at least 8"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    p.push("dataset.train_per_class and dataset.test_per_class must be positive".into());
                }
                if classes * train_per_class < 2 {
                    p.push("dataset must hold at least 2 training examples".into());
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                for (field, path) in [
                    ("dataset.train_images", train_images),
                    ("dataset.train_labels", train_labels),
                    ("dataset.test_images", test_images),
                    ("dataset.test_labels", test_labels),
                ] {
                    if !path.is_file() {
                        p.push(format!("{field}: {} does not exist", path.display()));
                    }
                }
                if c != 1 {
                    p.push(format!("IDX images have one channel but classifier.input_channels = {c}"));
                }
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    p.push("dataset.train_limit and dataset.test_limit must be positive".into());
                }
            }
        }
        p
    }

    pub fn check(&self) -> Result<()> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn same_dataset(p: &mut Vec<String>, classes: usize, size: usize, channels: usize, clf: &ClassifierConfig) {
    if classes != clf.classes {
        p.push(format!("dataset.classes = {classes} but classifier.classes = {}", clf.classes));
    }
    if size != clf.image_size {
        p.push(format!("dataset.image_size = {size} but classifier.image_size = {}", clf.image_size));
    }
    if channels != clf.input_channels {
        p.push(format!(
            "dataset.channels = {channels} but classifier.input_channels = {}",
            clf.input_channels
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
out_dir = "out"

[dataset]
source = "synthetic"
classes = 3
image_size = 16
channels = 1
train_per_class = 4
test_per_class = 2

[classifier]
input_channels = 1
image_size = 16
conv_widths = [4, 8]
classes = 3

[target_training]
epochs = 1
batch_size = 4
learning_rate = 0.05

[denoiser]
input_channels = 1
base_channels = 2
depth = 2
image_size = 16

[autoencoder]
input_channels = 1
image_size = 16
latent_dim = 8
widths = [4, 8]

[autoencoder_pretraining]
epochs = 1
batch_size = 4
learning_rate = 0.1

[zo]
estimator = "rge"
q = 4
xi = 0.005

[loss]
lambda_cs = 1.0
lambda_mmd = 1.0

[schedule]
epochs = 1
batch_size = 4
learning_rate = 0.01
noise_std = 0.25

[certify]
sigma = 0.25
n0 = 10
n = 20
alpha = 0.001
radii_grid = [0.0, 0.25]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn lists_every_problem() {
        let text = SMALL
            .replace("q = 4", "q = 0")
            .replace("n0 = 10", "n0 = 30")
            .replace("base_channels = 2\ndepth = 2\nimage_size = 16", "base_channels = 2\ndepth = 2\nimage_size = 10");
        let problems = ExperimentConfig::from_toml(&text).unwrap().validate();
        assert_eq!(problems.len(), 4, "{problems:#?}");
        assert!(problems.iter().any(|p| p.starts_with("zo.q")));
        assert!(problems.iter().any(|p| p.starts_with("certify.n ")));
        assert!(problems.iter().any(|p| p.contains("divisible by 2^depth")));
        assert!(problems.iter().any(|p| p.starts_with("denoiser.image_size = 10")));
    }

    #[test]
    fn unknown_fields_and_missing_files_are_rejected() {
        assert!(ExperimentConfig::from_toml(&SMALL.replace("seed = 3", "seed = 3\nsede = 4")).is_err());
        let idx = SMALL.replace(
            "source = \"synthetic\"\nclasses = 3\nimage_size = 16\nchannels = 1\ntrain_per_class = 4\ntest_per_class = 2",
            "source = \"idx\"\ntrain_images = \"/nonexistent/a\"\ntrain_labels = \"/nonexistent/b\"\ntest_images = \"/nonexistent/c\"\ntest_labels = \"/nonexistent/d\"",
        );
        let problems = ExperimentConfig::from_toml(&idx).unwrap().validate();
        assert!(problems.iter().any(|p| p.starts_with("dataset.train_images")), "{problems:?}");
        assert_eq!(problems.len(), 4);
    }
}
