use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unidetect_core::data::{load_idx, synth_blobs, LabeledDataset, PoisonConfig, SynthConfig, TriggerSpec};
use unidetect_core::detect::DetectorParams;
use unidetect_core::nn::{mnist_reference_layers, LayerSpec, Model, TrainConfig};
use unidetect_core::derive_seed;

use crate::CliError;

/// Whole-run configuration, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and population sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Present for a backdoored model.
    #[serde(default)]
    pub poison: Option<PoisonBlock>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub detectors: DetectorParams,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding the four MNIST IDX files.
    Mnist { dir: PathBuf },
    /// Gaussian-bump images; the test split uses a derived seed.
    Synthetic {
        seed: u64,
        n_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        classes: usize,
        side: usize,
        spread: f64,
    },
}

fn default_test_per_class() -> usize {
    20
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two conv/pool blocks, dense 128, softmax; 28x28x1 input.
    Mnist,
    /// One conv/pool block and a small dense head; any square single-channel input.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonBlock {
    pub count: usize,
    pub target: usize,
    pub seed: u64,
    /// Side of the white square trigger.
    #[serde(default = "default_trigger_size")]
    pub trigger_size: usize,
}

fn default_trigger_size() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Test rows drawn (seeded shuffle) as attack sources and clean samples.
    pub samples: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { epsilon: 0.2, samples: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch: 50, warmup: 1, repeats: 3 }
    }
}

pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    pub fn load_splits(&self) -> Result<Splits, CliError> {
        match &self.dataset {
            DatasetConfig::Mnist { dir } => {
                let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
                for f in files {
                    if !dir.join(f).is_file() {
                        return Err(CliError::MissingData(dir.join(f)));
                    }
                }
                let train = load_idx(&dir.join(files[0]), &dir.join(files[1]))?;
                let test = load_idx(&dir.join(files[2]), &dir.join(files[3]))?;
                Ok(Splits { train, test })
            }
            &DatasetConfig::Synthetic { seed, n_per_class, test_per_class, classes, side, spread } => {
                let train = synth_blobs(&SynthConfig { seed, n_per_class, classes, side, spread })?;
                let test =
                    synth_blobs(&SynthConfig { seed: derive_seed(seed, 1), n_per_class: test_per_class, classes, side, spread })?;
                Ok(Splits { train, test })
            }
        }
    }

    pub fn trigger(&self) -> Result<TriggerSpec, CliError> {
        let size = self.poison.as_ref().map_or(4, |p| p.trigger_size);
        let anchor = TriggerSpec::mnist_default().anchor;
        Ok(TriggerSpec::square(size, 1, 1.0, anchor)?)
    }

    pub fn poison_config(&self) -> Option<PoisonConfig> {
        self.poison.as_ref().map(|p| PoisonConfig { count: p.count, target: p.target, seed: p.seed })
    }

    pub fn init_model(&self, splits: &Splits) -> Result<Model, CliError> {
        let shape = splits.train.image_shape().to_vec();
        let classes = splits.train.classes();
        let layers = match self.model.arch {
            Arch::Mnist => {
                if shape != [28, 28, 1] || classes != 10 {
                    return Err(CliError::Config(format!("arch \"mnist\" needs 28x28x1 inputs and 10 classes, got {shape:?} / {classes}")));
                }
                mnist_reference_layers()
            }
            Arch::Small => small_layers(&shape, classes)?,
        };
        Ok(Model::new(shape, layers, self.seed)?)
    }
}

fn small_layers(shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>, CliError> {
    let &[h, w, c] = shape else {
        return Err(CliError::Config(format!("image shape {shape:?} is not [H, W, C]")));
    };
    if h < 2 || w < 2 {
        return Err(CliError::Config(format!("image {h}x{w} too small for arch \"small\"")));
    }
    Ok(vec![
        LayerSpec::Conv2d { kernel_h: 3, kernel_w: 3, c_in: c, c_out: 8, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: (h / 2) * (w / 2) * 8, outputs: 32 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 32, outputs: classes },
        LayerSpec::Softmax,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../configs/mnist_backdoor.toml"), include_str!("../../../configs/synthetic.toml")] {
            let cfg: RunConfig = toml::from_str(text).unwrap();
            cfg.train.validate().unwrap();
            assert!(cfg.poison.is_some());
        }
    }

    #[test]
    fn unknown_nested_key_rejected() {
        let text = include_str!("../../../configs/synthetic.toml").replace("[detectors.activation_space]", "[detectors.activation_space]\nkk = 1");
        assert!(toml::from_str::<RunConfig>(&text).unwrap_err().to_string().contains("kk"));
    }
}
