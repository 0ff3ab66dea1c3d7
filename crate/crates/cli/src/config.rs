//! Experiment configuration: a TOML file with every section optional.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use poolleak_core::attack::{Activation, MLPSpec, RetrainMode};
use poolleak_core::data::SyntheticConfig;
use poolleak_core::seeds::{SeedStreams, DATA_GEN, MODEL_INIT, NOISE, SHUFFLE};
use poolleak_core::timing::{ChannelKind, CollectionProtocol, DEFAULT_JITTER_BUDGET_NS};
use poolleak_core::trainer::DpConfig;
use poolleak_core::PoolVariant;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ChannelChoice {
    Wall,
    #[default]
    Surrogate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    #[default]
    Naive,
    Ct,
}

impl From<VariantChoice> for PoolVariant {
    fn from(v: VariantChoice) -> Self {
        match v {
            VariantChoice::Naive => PoolVariant::NaiveBranchy,
            VariantChoice::Ct => PoolVariant::ConstantTime,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    BuildCustom,
    File,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub source: ModelKind,
    /// Model JSON, for `source = "file"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Train the model on the dataset with `[train]` and `[dp]` before measuring.
    pub train: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DatasetKind,
    /// Directory holding `dataset.json`, for `source = "directory"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub ns_per_update: f64,
    pub base_ns: f64,
    pub noise_std_ns: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            ns_per_update: 10.0,
            base_ns: 1.0e4,
            noise_std_ns: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallSection {
    pub jitter_budget_ns: f64,
    pub self_test_samples: usize,
}

impl Default for WallSection {
    fn default() -> Self {
        WallSection {
            jitter_budget_ns: DEFAULT_JITTER_BUDGET_NS,
            self_test_samples: 2_000,
        }
    }
}

/// CNN training settings; the shuffle seed comes from the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 0.05,
            epochs: 25,
            batch_size: 16,
        }
    }
}

/// Label-classifier settings; the classifier seed comes from the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            hidden_layers: vec![64, 32],
            activation: Activation::Relu,
            learning_rate: 0.01,
            epochs: 1000,
            batch_size: 16,
        }
    }
}

impl ClassifierSection {
    pub fn spec(&self, seed: u64) -> MLPSpec {
        MLPSpec {
            hidden_layers: self.hidden_layers.clone(),
            activation: self.activation,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub classifier: ClassifierSection,
    /// Pick the classifier by K-fold grid search instead of using `classifier` as is.
    pub grid_search: bool,
    pub folds: usize,
    pub train_fraction: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            classifier: ClassifierSection::default(),
            grid_search: false,
            folds: 5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiaSection {
    /// The first `train_per_class` examples of each class form T; the rest form Q.
    pub train_per_class: usize,
    pub retrain_mode: RetrainMode,
    pub ratios: Vec<f64>,
}

impl Default for MiaSection {
    fn default() -> Self {
        MiaSection {
            train_per_class: 20,
            retrain_mode: RetrainMode::Scratch,
            ratios: poolleak_core::attack::default_ratios(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtVerifySection {
    pub inputs: usize,
}

impl Default for CtVerifySection {
    fn default() -> Self {
        CtVerifySection { inputs: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub out: PathBuf,
    pub channel: ChannelChoice,
    pub pool_variant: VariantChoice,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub protocol: CollectionProtocol,
    pub surrogate: SurrogateSection,
    pub wall: WallSection,
    pub train: TrainSection,
    pub dp: DpConfig,
    pub attack: AttackSection,
    pub mia: MiaSection,
    pub ct_verify: CtVerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("poolleak-out"),
            channel: ChannelChoice::default(),
            pool_variant: VariantChoice::default(),
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            protocol: CollectionProtocol::desk(),
            surrogate: SurrogateSection::default(),
            wall: WallSection::default(),
            train: TrainSection::default(),
            dp: DpConfig::default(),
            attack: AttackSection::default(),
            mia: MiaSection::default(),
            ct_verify: CtVerifySection::default(),
        }
    }
}

/// Seeds of the named sub-streams, as recorded in reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResolvedSeeds {
    pub model_init: u64,
    pub data_gen: u64,
    pub shuffle: u64,
    pub noise: u64,
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads, parses and validates `path`. Relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model.path, &mut cfg.dataset.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(m));
        self.protocol
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        match (self.model.source, &self.model.path) {
            (ModelKind::File, None) => return invalid("model.source = \"file\" needs model.path".into()),
            (ModelKind::File, Some(p)) if !p.is_file() => {
                return invalid(format!("model file {} does not exist", p.display()))
            }
            _ => {}
        }
        match (self.dataset.source, &self.dataset.path) {
            (DatasetKind::Directory, None) => {
                return invalid("dataset.source = \"directory\" needs dataset.path".into())
            }
            (DatasetKind::Directory, Some(p)) if !p.join(DATASET_FILE).is_file() => {
                return invalid(format!("{} does not exist", p.join(DATASET_FILE).display()))
            }
            _ => {}
        }
        self.channel_kind()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.wall.jitter_budget_ns > 0.0) || self.wall.self_test_samples == 0 {
            return invalid("wall.jitter_budget_ns and wall.self_test_samples must be positive".into());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.epochs == 0 || t.batch_size == 0 {
            return invalid("train.learning_rate, epochs and batch_size must be positive".into());
        }
        self.dp
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.attack
            .classifier
            .spec(0)
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.attack.train_fraction > 0.0 && self.attack.train_fraction < 1.0) {
            return invalid("attack.train_fraction must lie in (0, 1)".into());
        }
        if self.attack.folds < 2 {
            return invalid("attack.folds must be at least 2".into());
        }
        if self.mia.train_per_class == 0 {
            return invalid("mia.train_per_class must be positive".into());
        }
        if let Some(r) = self.mia.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return invalid(format!("mia ratio {r} must lie in (0, 1)"));
        }
        if self.ct_verify.inputs == 0 {
            return invalid("ct_verify.inputs must be positive".into());
        }
        Ok(())
    }

    pub fn seeds(&self) -> ResolvedSeeds {
        let s = SeedStreams::new(self.seed);
        ResolvedSeeds {
            model_init: s.seed(MODEL_INIT),
            data_gen: s.seed(DATA_GEN),
            shuffle: s.seed(SHUFFLE),
            noise: s.seed(NOISE),
        }
    }

    pub fn variant(&self) -> PoolVariant {
        self.pool_variant.into()
    }

    pub fn channel_kind(&self) -> ChannelKind {
        match self.channel {
            ChannelChoice::Wall => ChannelKind::WallClock,
            ChannelChoice::Surrogate => ChannelKind::Surrogate {
                ns_per_update: self.surrogate.ns_per_update,
                base_ns: self.surrogate.base_ns,
                noise_std_ns: self.surrogate.noise_std_ns,
                seed: self.seeds().noise,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse_str("[protocol]\nreps = 5\n").unwrap_err();
        assert!(matches!(err, CliError::Parse(ref m) if m.contains("reps")), "{err}");
        let err = ExperimentConfig::parse_str("sed = 5\n").unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn zero_reps_fails_validation() {
        let cfg = ExperimentConfig::parse_str("[protocol]\nreps_n = 0\ninputs_p = 1\nruns_m = 1\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn missing_model_file_fails_validation() {
        let cfg = ExperimentConfig::parse_str("[model]\nsource = \"file\"\npath = \"/nonexistent/m.json\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 2, ..Default::default() };
        assert_eq!(a.seeds(), ExperimentConfig::default().seeds());
        assert_ne!(a.seeds(), b.seeds());
        let s = a.seeds();
        let all = [s.model_init, s.data_gen, s.shuffle, s.noise];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
