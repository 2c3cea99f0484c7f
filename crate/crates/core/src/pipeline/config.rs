//! Run configuration files.
//!
//! ```json
//! {
//!   "format": 1,
//!   "architecture": {"format": 1, "template": "tiny_vgg", "num_classes": 2},
//!   "dataset": {"kind": "synthetic", "n": 1000, "test_n": 400, "h": 16, "w": 16, "c": 1, "num_classes": 2},
//!   "seed": 0,
//!   "train_epochs": 10,
//!   "basis": {"remove_fraction": 0.5, "method": "taylor_fo", "epochs": 5},
//!   "channel": {"remove_fraction": 0.3, "method": "taylor_fo", "epochs": 5}
//! }
//! ```
//!
//! `architecture` is either an inline architecture config or a path to one,
//! resolved relative to the run config's directory. Omitted fields take
//! their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{AugmentConfig, OptimizerConfig};
use crate::data::{load_mnist_idx, synth_dataset, Dataset, Split};
use crate::error::{Error, IoAt, Result};
use crate::graph::ArchConfig;
use crate::importance::Method;
use crate::scalar::Scalar;

pub const RUN_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Inline(ArchConfig),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        /// Size of the separately generated test set.
        #[serde(default = "default_test_n")]
        test_n: usize,
        h: usize,
        w: usize,
        #[serde(default = "one")]
        c: usize,
        num_classes: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "one")]
        upsample: usize,
        /// Use only the first `limit` training and test examples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_test_n() -> usize {
    400
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneStage {
    pub remove_fraction: f64,
    #[serde(with = "method_str")]
    pub method: Method,
    pub epochs: usize,
    pub iterations: usize,
}

impl Default for PruneStage {
    fn default() -> Self {
        Self {
            remove_fraction: 0.0,
            method: Method::TaylorFo,
            epochs: 5,
            iterations: 1,
        }
    }
}

mod method_str {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::importance::Method;

    pub fn serialize<S: Serializer>(m: &Method, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(m)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Method, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format: u32,
    pub architecture: ArchSource,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub train_epochs: usize,
    #[serde(default)]
    pub basis: PruneStage,
    #[serde(default)]
    pub channel: PruneStage,
    /// Refresh batch-norm statistics on the training split after pruning.
    #[serde(default = "yes")]
    pub recompute_bn: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub dropout: f64,
    /// Fraction of the training set held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_batch() -> usize {
    32
}

fn default_epochs() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn default_val_fraction() -> f64 {
    0.1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path).at(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ArchSource::Path(p) = &mut self.architecture {
            fix(p);
        }
        if let DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.format != RUN_FORMAT {
            return bad(format!(
                "unsupported run config format {} (this build reads format {RUN_FORMAT})",
                self.format
            ));
        }
        for (name, stage) in [("basis", &self.basis), ("channel", &self.channel)] {
            if !(0.0..1.0).contains(&stage.remove_fraction) {
                return bad(format!(
                    "{name}.remove_fraction must lie in [0, 1), got {}",
                    stage.remove_fraction
                ));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        let o = &self.optimizer;
        if !(o.lr_min > 0.0 && o.lr_max >= o.lr_min) || !(0.0..1.0).contains(&o.momentum) {
            return bad("optimizer needs 0 < lr_min <= lr_max and momentum in [0, 1)".into());
        }
        if let ArchSource::Inline(a) = &self.architecture {
            a.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<ArchConfig> {
        match &self.architecture {
            ArchSource::Inline(a) => Ok(a.clone()),
            ArchSource::Path(p) => ArchConfig::load(p),
        }
    }

    /// Full training set and test set.
    pub fn load_data<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                test_n,
                h,
                w,
                c,
                num_classes,
                seed,
            } => {
                let seed = seed.unwrap_or(self.seed);
                let train = synth_dataset(*n, *h, *w, *c, *num_classes, seed)?;
                let mut test = synth_dataset(*test_n, *h, *w, *c, *num_classes, seed ^ TEST_SEED_SALT)?;
                test.split = Split::Test;
                Ok((train, test))
            }
            DatasetSpec::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                upsample,
                limit,
            } => {
                let mut train: Dataset<T> = load_mnist_idx(train_images, train_labels, *upsample)?;
                let mut test: Dataset<T> = load_mnist_idx(test_images, test_labels, *upsample)?;
                if let Some(limit) = *limit {
                    let take = |d: &Dataset<T>, split| {
                        let rows: Vec<usize> = (0..d.len().min(limit)).collect();
                        d.subset(&rows, split)
                    };
                    train = take(&train, Split::Train);
                    test = take(&test, Split::Test);
                }
                train.split = Split::Train;
                Ok((train, test))
            }
        }
    }
}

/// Keeps the synthetic test stream distinct from the training stream.
const TEST_SEED_SALT: u64 = 0x7e57_7e57_7e57_7e57;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "format": 1,
        "architecture": {"format": 1, "template": "tiny_vgg", "num_classes": 2},
        "dataset": {"kind": "synthetic", "n": 10, "h": 8, "w": 8, "num_classes": 2}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.train_epochs, 10);
        assert!(cfg.recompute_bn);
        assert_eq!(cfg.basis.method, Method::TaylorFo);
        assert_eq!(cfg.basis.iterations, 1);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
    }

    #[test]
    fn rejects_bad_fraction_and_format() {
        let bad = MINIMAL.replace("\"seed\"", "\"x\"").replacen(
            "\"format\": 1,\n        \"architecture\"",
            "\"format\": 1, \"basis\": {\"remove_fraction\": 1.0},\n        \"architecture\"",
            1,
        );
        assert!(RunConfig::from_json(&bad).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replacen("\"format\": 1", "\"format\": 7", 1)).is_err());
    }

    #[test]
    fn method_round_trip() {
        let mut cfg = RunConfig::from_json(MINIMAL).unwrap();
        cfg.channel.method = Method::Random { seed: 4 };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"random:4\""));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
