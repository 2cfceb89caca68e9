//! Experiment configuration: parsing, defaults and validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use felicia_core::corpus;
use felicia_core::eval::UtilityClassifierSpec;
use felicia_core::gan::{
    DiscriminatorSpec, GeneratorSpec, LatentDistribution, LatentPrior, MeasureFunction, MeasureKind,
};
use felicia_core::nn::optim::OptimizerKind;
use felicia_core::nn::{Activation, LayerSpec, Shape};
use felicia_core::partition::{default_lesion_table, CountEntry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported config extension for {0} (use .toml or .json)")]
    Extension(PathBuf),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusName {
    DigitFour,
    Animals,
    Lesions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Built-in procedural corpus. `size` is the image count for
    /// `digit_four` and the per-subgroup count for `animals`; `counts` are
    /// the lesion subgroup sizes.
    Corpus {
        name: CorpusName,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        counts: Option<[usize; 4]>,
        #[serde(default)]
        seed: u64,
    },
    /// Image directory with a `filename,class,subgroup` manifest, resized on load.
    Folder {
        path: PathBuf,
        manifest: PathBuf,
        height: usize,
        width: usize,
        #[serde(default = "one")]
        channels: usize,
    },
}

fn one() -> usize {
    1
}

impl DatasetSpec {
    pub fn shape(&self) -> Shape {
        match self {
            Self::Corpus { .. } => corpus::SHAPE,
            Self::Folder {
                height,
                width,
                channels,
                ..
            } => Shape::image(*channels, *height, *width),
        }
    }
}

/// Which generators produce a site's synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// One class-conditional generator per site.
    Conditional,
    /// One unconditional generator per site and class, each trained on
    /// that class's shard.
    PerClass,
}

/// What a utility classifier trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Helpee real data plus synthetic data.
    Augment,
    /// Synthetic data only.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentKind {
    /// Cluster-biased shards of one image class; reports how much of the
    /// missing cluster each generator covers.
    Coverage {
        alphas: Vec<f64>,
        n_per_subset: usize,
        #[serde(default = "default_generated")]
        n_generated: usize,
    },
    /// Subgroup-biased helpee; a classifier is trained on helpee real data
    /// with or without synthetic augmentation.
    Subgroup {
        betas: Vec<f64>,
        n_per_class_per_site: usize,
        subgroup: String,
        complement: String,
        /// Subgroup whose accuracy is the headline metric.
        focus: String,
        #[serde(default = "default_subgroup_holdout")]
        holdout_per_class: usize,
        #[serde(default = "default_split_ratio")]
        split_ratio: f64,
        #[serde(default)]
        validation_size: Option<usize>,
        #[serde(default = "per_class")]
        generators: GeneratorMode,
        #[serde(default = "augment")]
        training: TrainingMode,
        /// Synthetic images per class; defaults to the helpee's class histogram.
        #[serde(default)]
        synthetic_per_class: Option<usize>,
        #[serde(default)]
        privgan: bool,
    },
    /// Fixed-count helpee carved after a class-balanced holdout.
    Lesion {
        #[serde(default = "default_lesion_table")]
        count_table: Vec<CountEntry>,
        #[serde(default = "default_lesion_holdout")]
        holdout_per_class: usize,
        #[serde(default = "default_split_ratio")]
        split_ratio: f64,
        #[serde(default)]
        validation_size: Option<usize>,
        /// Subgroup whose accuracy is the headline metric.
        #[serde(default = "nevi")]
        focus: String,
        #[serde(default = "conditional")]
        generators: GeneratorMode,
        #[serde(default = "synthetic")]
        training: TrainingMode,
        #[serde(default = "default_lesion_synthetic")]
        synthetic_per_class: Option<usize>,
        #[serde(default = "yes")]
        privgan: bool,
    },
}

fn default_generated() -> usize {
    2000
}
fn default_subgroup_holdout() -> usize {
    500
}
fn default_lesion_holdout() -> usize {
    1000
}
fn default_split_ratio() -> f64 {
    0.5
}
fn default_lesion_synthetic() -> Option<usize> {
    Some(200)
}
fn per_class() -> GeneratorMode {
    GeneratorMode::PerClass
}
fn conditional() -> GeneratorMode {
    GeneratorMode::Conditional
}
fn augment() -> TrainingMode {
    TrainingMode::Augment
}
fn synthetic() -> TrainingMode {
    TrainingMode::Synthetic
}
fn nevi() -> String {
    "melanocytic_nevi".into()
}
fn yes() -> bool {
    true
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Coverage { .. } => "coverage",
            Self::Subgroup { .. } => "subgroup",
            Self::Lesion { .. } => "lesion",
        }
    }
}

/// Site GAN and adversary settings. Explicit layer specs override the
/// MLP shorthand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSettings {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub latent_distribution: LatentDistribution,
    #[serde(default = "default_generator_hidden")]
    pub generator_hidden: Vec<usize>,
    #[serde(default = "default_discriminator_hidden")]
    pub discriminator_hidden: Vec<usize>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorSpec>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_step")]
    pub adversary_step_size: f64,
}

fn default_latent_dim() -> usize {
    32
}
fn default_generator_hidden() -> Vec<usize> {
    vec![128, 256]
}
fn default_discriminator_hidden() -> Vec<usize> {
    vec![128]
}
fn default_step() -> f64 {
    2e-4
}

impl Default for GanSettings {
    fn default() -> Self {
        Self {
            latent_dim: default_latent_dim(),
            latent_distribution: LatentDistribution::default(),
            generator_hidden: default_generator_hidden(),
            discriminator_hidden: default_discriminator_hidden(),
            generator: None,
            discriminator: None,
            optimizer: OptimizerKind::default(),
            step_size: default_step(),
            adversary_step_size: default_step(),
        }
    }
}

impl GanSettings {
    pub fn latent(&self) -> LatentPrior {
        LatentPrior {
            dimension: self.latent_dim,
            distribution: self.latent_distribution,
        }
    }

    pub fn generator_spec(&self, shape: Shape, n_classes: Option<usize>) -> GeneratorSpec {
        match &self.generator {
            Some(g) => GeneratorSpec {
                n_classes,
                ..g.clone()
            },
            None => GeneratorSpec::mlp(self.latent(), &self.generator_hidden, shape, n_classes),
        }
    }

    pub fn discriminator_spec(&self, shape: Shape, n_classes: Option<usize>) -> DiscriminatorSpec {
        match &self.discriminator {
            Some(d) => DiscriminatorSpec {
                n_classes,
                ..d.clone()
            },
            None => DiscriminatorSpec::mlp(shape, &self.discriminator_hidden, n_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSettings {
    /// Only `log` is configurable.
    #[serde(default = "log_name")]
    pub kind: MeasureName,
    #[serde(default = "default_clamp")]
    pub clamp_epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureName {
    Log,
}

fn log_name() -> MeasureName {
    MeasureName::Log
}
fn default_clamp() -> f64 {
    felicia_core::gan::DEFAULT_CLAMP_EPSILON
}

impl Default for MeasureSettings {
    fn default() -> Self {
        Self {
            kind: MeasureName::Log,
            clamp_epsilon: default_clamp(),
        }
    }
}

impl MeasureSettings {
    pub fn function(&self) -> Result<MeasureFunction, ConfigError> {
        let kind = match self.kind {
            MeasureName::Log => MeasureKind::Log,
        };
        MeasureFunction::with_clamp(kind, self.clamp_epsilon)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub gan: GanSettings,
    #[serde(default = "default_classifier")]
    pub classifier: UtilityClassifierSpec,
    #[serde(default)]
    pub measure: MeasureSettings,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<[f64; 2]>,
    /// Training rounds per run.
    pub epochs: u64,
    #[serde(default = "default_cadence")]
    pub eval_cadence: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_k")]
    pub ensemble_k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_classifier() -> UtilityClassifierSpec {
    UtilityClassifierSpec::default()
}
fn default_cadence() -> u64 {
    50
}
fn default_batch() -> usize {
    64
}
fn default_k() -> usize {
    5
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// `{0, 0.25, 0.5, 1, 2, 4}²`.
pub fn default_lambda_grid() -> Vec<[f64; 2]> {
    let values = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
    values
        .iter()
        .flat_map(|&a| values.iter().map(move |&b| [a, b]))
        .collect()
}

/// A small dense classifier for fast runs on tiny images.
pub fn compact_classifier() -> UtilityClassifierSpec {
    UtilityClassifierSpec {
        layers: vec![
            LayerSpec::conv(8, 3, 2, 1),
            LayerSpec::act(Activation::Relu),
            LayerSpec::conv(16, 3, 2, 1),
            LayerSpec::act(Activation::Relu),
            LayerSpec::dense(32),
            LayerSpec::act(Activation::Relu),
        ],
        epochs: 15,
        ..UtilityClassifierSpec::default()
    }
}

impl ExperimentConfig {
    /// Parses TOML or JSON by extension; unknown keys are rejected.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.into(),
            message,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
            _ => Err(ConfigError::Extension(path.into())),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Checkpointed epochs: positive multiples of the cadence up to `epochs`.
    pub fn checkpoint_epochs(&self) -> Vec<u64> {
        let c = self.eval_cadence.max(1);
        (1..=self.epochs / c).map(|k| k * c).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.name.trim().is_empty() {
            return bad("name is empty".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.eval_cadence == 0 || self.eval_cadence > self.epochs {
            return bad(format!(
                "eval_cadence {} evaluates no epoch out of {}",
                self.eval_cadence, self.epochs
            ));
        }
        let checkpoints = self.epochs / self.eval_cadence;
        let ensembles = !matches!(self.experiment, ExperimentKind::Coverage { .. });
        if self.ensemble_k == 0 || (ensembles && self.ensemble_k as u64 > checkpoints) {
            return bad(format!(
                "ensemble_k {} needs that many checkpoints; epochs {} at cadence {} give {checkpoints}",
                self.ensemble_k, self.epochs, self.eval_cadence
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds repeat".into());
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if let Some(p) = self
            .lambda_grid
            .iter()
            .find(|p| p.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return bad(format!("lambda pair {p:?} must be finite and non-negative"));
        }
        let distinct: BTreeSet<[u64; 2]> = self
            .lambda_grid
            .iter()
            .map(|p| p.map(f64::to_bits))
            .collect();
        if distinct.len() != self.lambda_grid.len() {
            return bad("lambda_grid repeats a pair".into());
        }
        if !(self.gan.step_size > 0.0 && self.gan.adversary_step_size > 0.0) {
            return bad("step sizes must be positive".into());
        }
        self.measure.function()?;
        self.validate_dataset()?;
        self.validate_experiment()?;
        let shape = self.dataset.shape();
        let classes = match self.experiment {
            ExperimentKind::Coverage { .. } => None,
            _ => Some(2),
        };
        let g = self.gan.generator_spec(shape, classes);
        g.validate()
            .map_err(|e| ConfigError::Invalid(format!("generator: {e}")))?;
        self.gan
            .discriminator_spec(shape, classes)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("discriminator: {e}")))?;
        if g.output != shape {
            return bad(format!(
                "generator output {:?} does not match dataset shape {shape:?}",
                g.output
            ));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<(), ConfigError> {
        match &self.dataset {
            DatasetSpec::Corpus {
                name, size, counts, ..
            } => {
                if counts.is_some() && *name != CorpusName::Lesions {
                    return Err(ConfigError::Invalid(
                        "`counts` applies to the lesions corpus only".into(),
                    ));
                }
                if size.is_some() && *name == CorpusName::Lesions {
                    return Err(ConfigError::Invalid(
                        "the lesions corpus takes `counts`, not `size`".into(),
                    ));
                }
                let expected = match self.experiment {
                    ExperimentKind::Coverage { .. } => CorpusName::DigitFour,
                    ExperimentKind::Subgroup { .. } => CorpusName::Animals,
                    ExperimentKind::Lesion { .. } => CorpusName::Lesions,
                };
                if *name != expected {
                    return Err(ConfigError::Invalid(format!(
                        "{} experiments use the {expected:?} corpus, got {name:?}",
                        self.experiment.label()
                    )));
                }
            }
            DatasetSpec::Folder {
                path,
                manifest,
                height,
                width,
                channels,
            } => {
                for p in [path, manifest] {
                    if !p.exists() {
                        return Err(ConfigError::MissingFile(p.clone()));
                    }
                }
                if *height == 0 || *width == 0 || !matches!(channels, 1 | 3) {
                    return Err(ConfigError::Invalid(
                        "folder images need positive size and 1 or 3 channels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_experiment(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match &self.experiment {
            ExperimentKind::Coverage {
                alphas,
                n_per_subset,
                n_generated,
            } => {
                if alphas.is_empty() || alphas.iter().any(|a| !(0.0..=100.0).contains(a)) {
                    return bad("alphas must be non-empty percentages in [0, 100]".into());
                }
                if *n_per_subset == 0 || *n_generated == 0 {
                    return bad("n_per_subset and n_generated must be positive".into());
                }
            }
            ExperimentKind::Subgroup {
                betas,
                n_per_class_per_site,
                split_ratio,
                validation_size,
                subgroup,
                complement,
                focus,
                ..
            } => {
                if betas.is_empty() || betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
                    return bad("betas must be non-empty fractions in [0, 1]".into());
                }
                if *n_per_class_per_site == 0 {
                    return bad("n_per_class_per_site must be positive".into());
                }
                if subgroup == complement {
                    return bad("subgroup and complement must differ".into());
                }
                if focus.is_empty() {
                    return bad("focus subgroup is empty".into());
                }
                check_holdout(*split_ratio, *validation_size)?;
            }
            ExperimentKind::Lesion {
                count_table,
                split_ratio,
                validation_size,
                ..
            } => {
                if count_table.is_empty() {
                    return bad("count_table is empty".into());
                }
                check_holdout(*split_ratio, *validation_size)?;
            }
        }
        Ok(())
    }
}

fn check_holdout(split_ratio: f64, validation_size: Option<usize>) -> Result<(), ConfigError> {
    if !(0.0..1.0).contains(&split_ratio) {
        return Err(ConfigError::Invalid(format!(
            "split_ratio {split_ratio} leaves no validation set"
        )));
    }
    if validation_size == Some(0) {
        return Err(ConfigError::Invalid(
            "validation_size must be positive".into(),
        ));
    }
    Ok(())
}

/// Reads, applies defaults and checks every constraint.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let config = ExperimentConfig::from_path(path)?;
    config.validate()?;
    Ok(config)
}
