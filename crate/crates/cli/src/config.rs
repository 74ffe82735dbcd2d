use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use saddle_core::attack::{AttackConfig, Norm, PerturbationBudget};
use saddle_core::data::{self, Dataset};
use saddle_core::nn::Preset;
use saddle_core::seed::{self, tag};
use saddle_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// Directory with the MNIST IDX files or the CIFAR-10 `.bin` batches.
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: PathBuf::from("data/mnist"),
            n_train: 1000,
            n_eval: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub id: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub capacity_scale: usize,
    /// Checkpoint evaluated by attack / explore / sweep / inspect.
    pub checkpoint: Option<PathBuf>,
    /// Gradient source for black-box attacks (defaults to the target).
    pub source_checkpoint: Option<PathBuf>,
    /// Models compared by `transfer`.
    pub models: Vec<NamedCheckpoint>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "mnist_capacity".into(),
            capacity_scale: 1,
            checkpoint: None,
            source_checkpoint: None,
            models: vec![],
        }
    }
}

impl ModelSection {
    pub fn preset(&self) -> Result<Preset> {
        Ok(self.preset.parse()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonUnits {
    /// ε in the [0, 1] pixel scale.
    Unit,
    /// ε on the 0–255 scale, converted at load time.
    Pixel255,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub norm: Norm,
    pub epsilon: f64,
    pub units: EpsilonUnits,
    pub attacks: Vec<AttackConfig>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 0.3,
            units: EpsilonUnits::Unit,
            attacks: vec![AttackConfig::fgsm(), AttackConfig::pgd(40, 0.01, 1, 0)],
        }
    }
}

impl AttackSection {
    pub fn budget(&self) -> Result<PerturbationBudget> {
        let eps = match self.units {
            EpsilonUnits::Unit => self.epsilon,
            EpsilonUnits::Pixel255 => data::epsilon_from_255(self.epsilon),
        };
        Ok(PerturbationBudget::new(self.norm, eps)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub epsilons: Vec<f64>,
    pub sweep_norm: Norm,
    pub sweep_steps: usize,
    pub sweep_restarts: usize,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.1, 0.2, 0.3, 0.35, 0.4, 0.45],
            sweep_norm: Norm::Linf,
            sweep_steps: 40,
            sweep_restarts: 1,
            histogram_bins: 36,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    /// Positions in the eval split.
    pub examples: Vec<usize>,
    pub restarts: usize,
    pub attack: AttackConfig,
    pub segment_pairs: usize,
    pub segment_points: usize,
    pub max_pairs: usize,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            examples: vec![0],
            restarts: 20,
            attack: AttackConfig::pgd(40, 0.01, 1, 0),
            segment_pairs: 5,
            segment_points: 11,
            max_pairs: 10_000,
        }
    }
}

/// The whole experiment description. Unknown keys are rejected; every
/// field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub landscape: LandscapeSection,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            landscape: LandscapeSection::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Pushes the top-level seed into every nested seed so that the echoed
    /// config is self-consistent.
    pub fn resolve_seed(&mut self) {
        let s = self.seed;
        self.train.seed = seed::derive(s, &[tag::EPOCH]);
        for (i, a) in self.attack.attacks.iter_mut().enumerate() {
            a.seed = seed::derive(s, &[tag::ATTACK, i as u64]);
        }
        self.landscape.attack.seed = seed::derive(s, &[tag::ATTACK, u64::MAX]);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.preset()?;
        if self.model.capacity_scale == 0 {
            bail!("model.capacity_scale must be >= 1");
        }
        self.train.validate()?;
        self.attack.budget()?;
        for a in &self.attack.attacks {
            a.validate()?;
        }
        self.landscape.attack.validate()?;
        Ok(())
    }

    /// Loads the configured data and returns the seeded (train, eval) split.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let dir = &self.data.dir;
        let full = match self.data.dataset {
            DatasetKind::Mnist => data::load_mnist(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))
                .with_context(|| format!("loading MNIST from {}", dir.display()))?,
            DatasetKind::Cifar10 => {
                let paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                data::load_cifar10(&paths).with_context(|| format!("loading CIFAR-10 from {}", dir.display()))?
            }
        };
        Ok(data::subset_split(
            &full,
            self.data.n_train,
            self.data.n_eval,
            seed::derive(self.seed, &[tag::SPLIT]),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"data": {"n_trian": 5}}"#,
            r#"{"train": {"epochs": 1, "lr": 0.1}}"#,
            r#"{"attack": {"attacks": [{"kind": "pgd", "step": 3}]}}"#,
        ] {
            assert!(ExperimentConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn pixel_units_convert() {
        let c = ExperimentConfig::from_json(r#"{"attack": {"epsilon": 8, "units": "pixel255"}}"#).unwrap();
        assert_eq!(c.attack.budget().unwrap().epsilon, 8.0 / 255.0);
    }

    #[test]
    fn seed_resolution_is_deterministic() {
        let mut a = ExperimentConfig { seed: 5, ..Default::default() };
        let mut b = a.clone();
        a.resolve_seed();
        b.resolve_seed();
        assert_eq!(a, b);
        assert_ne!(a.attack.attacks[0].seed, a.attack.attacks[1].seed);
    }
}
