//! Experiment configuration: one strict JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, ProjectionConfig};
use crate::data::{synthetic_strokes, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fedsim::FedConfig;
use crate::io;
use crate::models::{Model, ModelSpec};
use crate::obfuscate::ObfuscationSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    ImageDir {
        dir: PathBuf,
        labels_csv: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

fn default_test_examples() -> usize {
    100
}

fn default_aux_examples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSource,
    /// Held out for test accuracy, taken before the auxiliary block.
    #[serde(default = "default_test_examples")]
    pub test_examples: usize,
    /// Attacker-side data for autoencoder projections, taken from the end.
    #[serde(default = "default_aux_examples")]
    pub aux_examples: usize,
}

/// Loaded data split into disjoint blocks `[train | test | aux]`.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub aux: Option<Dataset>,
}

impl DataConfig {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match &self.source {
            DatasetSource::Idx { images, labels, classes } => {
                io::load_idx(&resolve(images), &resolve(labels), *classes)
            }
            DatasetSource::ImageDir { dir, labels_csv, classes } => {
                io::load_image_dir(&resolve(dir), &resolve(labels_csv), *classes)
            }
            DatasetSource::Synthetic(spec) => synthetic_strokes(spec),
        }
    }

    pub fn split(&self, data: &Dataset) -> Result<Splits> {
        let n = data.len();
        let held = self.test_examples + self.aux_examples;
        if self.test_examples == 0 || held >= n {
            return Err(Error::Config(format!(
                "{n} examples cannot hold {} test and {} auxiliary examples plus training data",
                self.test_examples, self.aux_examples
            )));
        }
        let train_end = n - held;
        let test_end = train_end + self.test_examples;
        let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        Ok(Splits {
            train: data.subset(&range(0, train_end))?,
            test: data.subset(&range(train_end, test_end))?,
            aux: if self.aux_examples > 0 {
                Some(data.subset(&range(test_end, n))?)
            } else {
                None
            },
        })
    }
}

fn default_capture_examples() -> usize {
    1
}

/// Which client update the attacker observes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    #[serde(default)]
    pub round: usize,
    #[serde(default)]
    pub client: usize,
    /// Victim batch: this many leading examples of the client's shard.
    #[serde(default = "default_capture_examples")]
    pub examples: usize,
    /// Local epochs for the victim; defaults to the federation's.
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            round: 0,
            client: 0,
            examples: default_capture_examples(),
            tau: None,
            batch: None,
        }
    }
}

impl CaptureConfig {
    pub fn federation(&self, fed: &FedConfig) -> FedConfig {
        FedConfig {
            tau: self.tau.unwrap_or(fed.tau),
            batch: self.batch.unwrap_or(fed.batch),
            ..fed.clone()
        }
    }
}

fn default_repeats() -> usize {
    1
}

/// Grid of attack cells; every list must be non-empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub batch_sizes: Vec<usize>,
    #[serde(default = "SweepSpec::default_rounds")]
    pub rounds: Vec<usize>,
    /// Projections to compare; defaults to the attack's own.
    #[serde(default)]
    pub projections: Vec<ProjectionConfig>,
    /// Obfuscation chains to compare; defaults to the experiment's own.
    #[serde(default)]
    pub obfuscations: Vec<ObfuscationSpec>,
    /// Independent victims and attack seeds per cell.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl SweepSpec {
    fn default_rounds() -> Vec<usize> {
        vec![0]
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub federation: FedConfig,
    #[serde(default)]
    pub obfuscation: ObfuscationSpec,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub capture: CaptureConfig,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks that serde cannot express. Runs before any computation.
    pub fn validate(&self) -> Result<()> {
        Model::new(self.model.clone())?;
        self.federation.validate()?;
        self.obfuscation.validate()?;
        self.attack.validate()?;
        if self.capture.examples == 0 {
            return Err(Error::Config("capture.examples must be at least 1".into()));
        }
        if self.capture.client >= self.federation.clients {
            return Err(Error::Config(format!(
                "capture.client {} of {} clients",
                self.capture.client, self.federation.clients
            )));
        }
        if matches!(self.capture.tau, Some(0)) || matches!(self.capture.batch, Some(0)) {
            return Err(Error::Config("capture tau and batch must be at least 1".into()));
        }
        if let DatasetSource::Synthetic(s) = &self.data.source {
            if s.shape != self.model.input || s.classes != self.model.classes {
                return Err(Error::Config(format!(
                    "synthetic data {:?} x {} classes does not fit model input {:?} x {}",
                    s.shape, s.classes, self.model.input, self.model.classes
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.batch_sizes.is_empty() || sweep.batch_sizes.contains(&0) {
                return Err(Error::Config("sweep.batch_sizes needs positive entries".into()));
            }
            if sweep.rounds.is_empty() || sweep.repeats == 0 {
                return Err(Error::Config("sweep needs rounds and at least one repeat".into()));
            }
            for o in &sweep.obfuscations {
                o.validate()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"architecture": "lenet_mini", "input": [1, 28, 28], "classes": 10},
        "data": {"source": {"kind": "synthetic", "examples": 500, "classes": 10, "shape": [1, 28, 28]}}
    }"#;

    #[test]
    fn defaults_follow_the_usual_local_setup() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.federation.tau, 5);
        assert_eq!(cfg.federation.eta, 5e-3);
        assert_eq!(cfg.federation.batch, 16);
        assert_eq!(cfg.federation.checkpoints, vec![0, 1, 10, 30, 50]);
        assert!(cfg.obfuscation.stages.is_empty());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        let extra = MINIMAL.replacen("\"model\"", "\"modle\": 1, \"model\"", 1);
        assert!(matches!(ExperimentConfig::from_json(&extra), Err(Error::Config(_))));
        let nested = MINIMAL.replace("\"classes\": 10}", "\"classes\": 10, \"depth\": 3}");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.federation.sampled = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.attack.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_blocks() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let data = cfg.data.load(Path::new(".")).unwrap();
        let s = cfg.data.split(&data).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.aux.as_ref().unwrap().len()), (200, 100, 200));
        assert_eq!(s.test.image(0), data.image(200));
    }
}
