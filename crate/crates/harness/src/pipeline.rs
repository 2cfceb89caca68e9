//! Staged experiment pipeline: partition → train → sweep → select →
//! evaluate → aggregate. Every stage reads its inputs from disk, so a run
//! can resume after any completed stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _};
use felicia_core::checkpoint::{write_atomic, CheckpointError, CheckpointStore};
use felicia_core::corpus;
use felicia_core::data::{load_image_folder, ImageDataset};
use felicia_core::eval::{
    aggregate_runs, coverage_stats, epoch_utility_sweep, evaluate, read_reports_csv, select_lambda,
    select_top_epochs, train_utility_classifier, utility_training_set, write_coverage_csv,
    write_reports_csv, EvalError, GeneratorStores, Split, SweepKey, SynthesisPlan,
    UtilityClassifierSpec, UtilityReport,
};
use felicia_core::gan::{generate, local_round, GanPair, MeasureFunction};
use felicia_core::mechanism::{site_streams, FeliciaConfig, FeliciaState, LambdaVector};
use felicia_core::partition::{
    alpha_mix, balanced_subsample, beta_subgroup_split, carve_holdout, lesion_fixed_split,
    pca_kmeans_split, ClusterSplit, SitePartition,
};
use felicia_core::rng;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, CorpusName, DatasetSpec, ExperimentConfig, ExperimentKind, GeneratorMode,
    TrainingMode,
};
use crate::manifest::{RunManifest, RunStatus, Stage};

pub const VALIDATION_REPORTS: &str = "validation_reports.csv";
pub const SELECTION: &str = "selection.json";
pub const FINAL_TEST_METRICS: &str = "final_test_metrics.csv";
pub const COVERAGE_METRICS: &str = "coverage_metrics.csv";
pub const AGGREGATE: &str = "aggregate.csv";
pub const CLUSTER_SPLIT: &str = "partitions/cluster_split.json";

pub const RECIPE_REAL: &str = "real";
pub const RECIPE_GAN: &str = "gan";
pub const RECIPE_FELICIA: &str = "felicia";
pub const RECIPE_PRIVGAN: &str = "privgan";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage:?} failed: {source:#}; resume with {manifest}")]
    Stage {
        stage: Stage,
        manifest: PathBuf,
        source: anyhow::Error,
    },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Validates the config and runs every stage from scratch.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, RunError> {
    config.validate()?;
    let out = config.output_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(config.clone(), out);
    manifest.save().context("writing manifest")?;
    drive(&mut manifest)?;
    Ok(manifest)
}

/// Continues a run from its last completed stage; a finished run is left
/// untouched.
pub fn resume(manifest_path: &Path) -> Result<RunManifest, RunError> {
    let mut manifest = RunManifest::load(manifest_path)?;
    if manifest.is_complete() {
        info!("run already complete");
        return Ok(manifest);
    }
    manifest.config.validate()?;
    drive(&mut manifest)?;
    Ok(manifest)
}

fn drive(manifest: &mut RunManifest) -> Result<(), RunError> {
    let start = Instant::now();
    let ctx =
        Ctx::new(&manifest.config, &manifest.output_dir).map_err(|source| RunError::Stage {
            stage: Stage::Partition,
            manifest: manifest.path(),
            source,
        })?;
    manifest.status = RunStatus::Running;
    for stage in Stage::ALL {
        if manifest.is_done(stage) {
            info!("stage {stage:?} already complete");
            continue;
        }
        info!("stage {stage:?}");
        let t = Instant::now();
        let outcome = match stage {
            Stage::Partition => ctx.partition(manifest),
            Stage::Train => ctx.train(manifest),
            Stage::Sweep => ctx.sweep(manifest),
            Stage::Select => ctx.select(manifest),
            Stage::Evaluate => ctx.evaluate(manifest),
            Stage::Aggregate => ctx.aggregate(manifest),
        };
        match outcome {
            Ok(()) => manifest.mark(stage, t.elapsed().as_secs_f64()),
            Err(source) => {
                manifest.status = RunStatus::Failed {
                    stage,
                    error: format!("{source:#}"),
                };
                manifest.wall_clock_seconds += start.elapsed().as_secs_f64();
                manifest.save().context("writing manifest")?;
                return Err(RunError::Stage {
                    stage,
                    manifest: manifest.path(),
                    source,
                });
            }
        }
        manifest.save().context("writing manifest")?;
    }
    manifest.status = RunStatus::Complete;
    manifest.wall_clock_seconds += start.elapsed().as_secs_f64();
    manifest.save().context("writing manifest")?;
    Ok(())
}

/// Builds the configured dataset.
pub fn load_dataset(spec: &DatasetSpec) -> anyhow::Result<ImageDataset> {
    Ok(match spec {
        DatasetSpec::Corpus {
            name,
            size,
            counts,
            seed,
        } => match name {
            CorpusName::DigitFour => corpus::digit_four(size.unwrap_or(5000), *seed),
            CorpusName::Animals => corpus::animals(size.unwrap_or(1750), *seed),
            CorpusName::Lesions => corpus::lesions(counts.unwrap_or(corpus::LESION_COUNTS), *seed),
        },
        DatasetSpec::Folder { path, manifest, .. } => {
            load_image_folder(path, manifest, spec.shape())?
        }
    })
}

/// One value of the swept bias parameter.
#[derive(Clone, Debug)]
struct BiasPoint {
    /// `alpha=…`, `beta=…` or `counts`; doubles as the report config id.
    label: String,
    value: f64,
}

/// Materialized shards for one bias point and seed, plus the held-out sets
/// of utility experiments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub partition: SitePartition,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Top-epoch choices and λ selections, all made on validation reports.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Selection {
    pub points: BTreeMap<String, PointSelection>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PointSelection {
    pub felicia_lambdas: Option<[f64; 2]>,
    pub privgan_lambdas: Option<[f64; 2]>,
    pub runs: Vec<RunSelection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSelection {
    pub recipe: String,
    pub lambdas: Option<[f64; 2]>,
    pub seed: u64,
    pub epochs: Vec<u64>,
}

/// A training job: a FELICIA run at one λ pair, or the local-GAN baseline.
#[derive(Clone, Debug)]
struct Job {
    point: usize,
    seed: u64,
    lambdas: Option<[f64; 2]>,
    class: Option<usize>,
}

fn lambda_tag(l: Option<[f64; 2]>) -> String {
    match l {
        Some([a, b]) => format!("l{a}_{b}"),
        None => RECIPE_GAN.to_string(),
    }
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    data: ImageDataset,
    measure: MeasureFunction,
    points: Vec<BiasPoint>,
}

impl Ctx {
    fn new(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Self> {
        let data = load_dataset(&config.dataset)?;
        let points = match &config.experiment {
            ExperimentKind::Coverage { alphas, .. } => alphas
                .iter()
                .map(|&a| BiasPoint {
                    label: format!("alpha={a}"),
                    value: a,
                })
                .collect(),
            ExperimentKind::Subgroup { betas, .. } => betas
                .iter()
                .map(|&b| BiasPoint {
                    label: format!("beta={b}"),
                    value: b,
                })
                .collect(),
            ExperimentKind::Lesion { .. } => vec![BiasPoint {
                label: "counts".into(),
                value: 0.0,
            }],
        };
        Ok(Self {
            config: config.clone(),
            out: out.to_path_buf(),
            data,
            measure: config.measure.function()?,
            points,
        })
    }

    fn is_utility(&self) -> bool {
        !matches!(self.config.experiment, ExperimentKind::Coverage { .. })
    }

    fn generator_mode(&self) -> GeneratorMode {
        match &self.config.experiment {
            ExperimentKind::Coverage { .. } => GeneratorMode::Conditional,
            ExperimentKind::Subgroup { generators, .. }
            | ExperimentKind::Lesion { generators, .. } => *generators,
        }
    }

    /// Class count seen by conditional networks, if any.
    fn conditioning(&self) -> Option<usize> {
        match (&self.config.experiment, self.generator_mode()) {
            (ExperimentKind::Coverage { .. }, _) | (_, GeneratorMode::PerClass) => None,
            (_, GeneratorMode::Conditional) => Some(self.data.n_classes()),
        }
    }

    fn privgan(&self) -> bool {
        match &self.config.experiment {
            ExperimentKind::Coverage { .. } => false,
            ExperimentKind::Subgroup { privgan, .. } | ExperimentKind::Lesion { privgan, .. } => {
                *privgan
            }
        }
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn partition_rel(&self, point: usize, seed: u64) -> PathBuf {
        PathBuf::from("partitions").join(format!("{}_seed{seed}.json", self.points[point].label))
    }

    fn record(&self, point: usize, seed: u64) -> anyhow::Result<PartitionRecord> {
        let p = self.path(self.partition_rel(point, seed));
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn cluster_split(&self) -> anyhow::Result<ClusterSplit> {
        let p = self.path(CLUSTER_SPLIT);
        let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    // ---- partition -------------------------------------------------------

    fn partition(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        std::fs::create_dir_all(self.path("partitions"))?;
        let split = if let ExperimentKind::Coverage { .. } = self.config.experiment {
            let split = pca_kmeans_split(self.data.images())?;
            write_json(&self.path(CLUSTER_SPLIT), &split)?;
            manifest.add_artifact("cluster_split", CLUSTER_SPLIT);
            Some(split)
        } else {
            None
        };
        for (i, point) in self.points.iter().enumerate() {
            for &seed in &self.config.seeds {
                let record = self.materialize(point, seed, split.as_ref())?;
                let rel = self.partition_rel(i, seed);
                write_json(&self.path(&rel), &record)?;
                manifest.add_artifact(format!("partition/{}/seed{seed}", point.label), rel);
            }
        }
        Ok(())
    }

    fn materialize(
        &self,
        point: &BiasPoint,
        seed: u64,
        split: Option<&ClusterSplit>,
    ) -> anyhow::Result<PartitionRecord> {
        let ds = &self.data;
        let holdout =
            |per_class: usize, ratio: f64, validation_size: Option<usize>| -> anyhow::Result<_> {
                let h = carve_holdout(ds, per_class, ratio, seed)?;
                let validation = match validation_size {
                    Some(n) => balanced_subsample(ds, &h.validation, n, seed)?,
                    None => h.validation,
                };
                Ok((h.test, validation, h.remainder))
            };
        Ok(match &self.config.experiment {
            ExperimentKind::Coverage { n_per_subset, .. } => {
                let split = split.ok_or_else(|| anyhow!("cluster split missing"))?;
                PartitionRecord {
                    partition: alpha_mix(split, point.value, *n_per_subset, seed)?,
                    test: vec![],
                    validation: vec![],
                }
            }
            ExperimentKind::Subgroup {
                n_per_class_per_site,
                subgroup,
                complement,
                holdout_per_class,
                split_ratio,
                validation_size,
                ..
            } => {
                let (test, validation, remainder) =
                    holdout(*holdout_per_class, *split_ratio, *validation_size)?;
                let pool = ds.subset(&remainder);
                let mut partition = beta_subgroup_split(
                    &pool,
                    subgroup,
                    complement,
                    point.value,
                    *n_per_class_per_site,
                    seed,
                )?;
                for site in &mut partition.sites {
                    site.iter_mut().for_each(|i| *i = remainder[*i]);
                    site.sort_unstable();
                }
                PartitionRecord {
                    partition,
                    test,
                    validation,
                }
            }
            ExperimentKind::Lesion {
                count_table,
                holdout_per_class,
                split_ratio,
                validation_size,
                ..
            } => {
                let (test, validation, remainder) =
                    holdout(*holdout_per_class, *split_ratio, *validation_size)?;
                PartitionRecord {
                    partition: lesion_fixed_split(ds, &remainder, count_table, seed)?,
                    test,
                    validation,
                }
            }
        })
    }

    // ---- train -----------------------------------------------------------

    fn jobs(&self) -> Vec<Job> {
        let classes: Vec<Option<usize>> = match self.generator_mode() {
            GeneratorMode::PerClass if self.is_utility() => {
                (0..self.data.n_classes()).map(Some).collect()
            }
            _ => vec![None],
        };
        let mut lambdas: Vec<Option<[f64; 2]>> = vec![None];
        lambdas.extend(self.config.lambda_grid.iter().map(|&l| Some(l)));
        let mut jobs = Vec::new();
        for point in 0..self.points.len() {
            for &seed in &self.config.seeds {
                for &l in &lambdas {
                    for &class in &classes {
                        jobs.push(Job {
                            point,
                            seed,
                            lambdas: l,
                            class,
                        });
                    }
                }
            }
        }
        jobs
    }

    fn job_dir(&self, job: &Job) -> PathBuf {
        let class = job.class.map_or("all".to_string(), |c| format!("class{c}"));
        self.path(
            PathBuf::from("checkpoints")
                .join(&self.points[job.point].label)
                .join(lambda_tag(job.lambdas))
                .join(format!("seed{}", job.seed))
                .join(class),
        )
    }

    fn train(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        let jobs = self.jobs();
        let run = |job: &Job| -> anyhow::Result<()> {
            if self.job_dir(job).join("DONE").exists() {
                return Ok(());
            }
            self.train_job(job)
        };
        if self.config.deterministic {
            jobs.iter().try_for_each(run)?;
        } else {
            jobs.par_iter().try_for_each(run)?;
        }
        manifest.add_artifact("checkpoints", "checkpoints");
        Ok(())
    }

    /// Seed of a job's networks; per-class jobs get distinct streams.
    fn job_seed(job: &Job) -> u64 {
        match job.class {
            Some(c) => rng::derive_seed(job.seed, "class-generator", c as u64),
            None => job.seed,
        }
    }

    fn train_job(&self, job: &Job) -> anyhow::Result<()> {
        let dir = self.job_dir(job);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let mut store = CheckpointStore::open(&dir)?;
        let record = self.record(job.point, job.seed)?;
        let shards: Vec<Vec<usize>> = record
            .partition
            .sites
            .iter()
            .map(|s| {
                s.iter()
                    .copied()
                    .filter(|&i| job.class.is_none_or(|c| self.data.classes()[i] == c))
                    .collect()
            })
            .collect();
        if let Some((site, s)) = shards
            .iter()
            .enumerate()
            .find(|(_, s)| s.len() < self.config.batch_size)
        {
            bail!(
                "site {site} shard has {} images, fewer than batch_size {}",
                s.len(),
                self.config.batch_size
            );
        }
        let labeled = self.conditioning().is_some();
        let data = shards
            .iter()
            .map(|s| self.data.batch(s, labeled))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = self.config.dataset.shape();
        let gen = self.config.gan.generator_spec(shape, self.conditioning());
        let disc = self
            .config
            .gan
            .discriminator_spec(shape, self.conditioning());
        let seed = Self::job_seed(job);
        let checkpoints = self.config.checkpoint_epochs();
        let bs = self.config.batch_size;
        match job.lambdas {
            Some([l1, l2]) => {
                let config = FeliciaConfig {
                    generator: gen,
                    discriminator: disc,
                    optimizer: self.config.gan.optimizer,
                    step_size: self.config.gan.step_size,
                    adversary_step_size: self.config.gan.adversary_step_size,
                    lambdas: LambdaVector::new(vec![l1, l2])?,
                    measure: self.measure,
                    seed,
                    deterministic: self.config.deterministic,
                };
                let mut state = FeliciaState::new(config, shards)?;
                for epoch in 1..=self.config.epochs {
                    state.train_round(&data, bs)?;
                    if checkpoints.contains(&epoch) {
                        for site in state.sites() {
                            store.save(site.site_id, epoch, job.seed, &site.pair.generator)?;
                        }
                    }
                }
            }
            None => {
                // Coverage compares every site with its own local GAN; utility
                // experiments need the helpee's only.
                let sites = if self.is_utility() { 1 } else { data.len() };
                for (site, shard) in data.iter().enumerate().take(sites) {
                    let (mut init, mut train) = site_streams(seed, site);
                    let mut pair = GanPair::new(&gen, &disc, self.config.gan.optimizer, &mut init)?;
                    for epoch in 1..=self.config.epochs {
                        local_round(
                            &mut pair,
                            shard,
                            bs,
                            &self.measure,
                            self.config.gan.step_size,
                            &mut train,
                        )?;
                        if checkpoints.contains(&epoch) {
                            store.save(site, epoch, job.seed, &pair.generator)?;
                        }
                    }
                }
            }
        }
        write_atomic(&dir.join("DONE"), b"")?;
        Ok(())
    }

    // ---- sweep -----------------------------------------------------------

    fn stores_for(
        &self,
        point: usize,
        seed: u64,
        lambdas: Option<[f64; 2]>,
    ) -> anyhow::Result<Vec<CheckpointStore>> {
        let jobs: Vec<Job> = match self.generator_mode() {
            GeneratorMode::PerClass if self.is_utility() => (0..self.data.n_classes())
                .map(|c| Job {
                    point,
                    seed,
                    lambdas,
                    class: Some(c),
                })
                .collect(),
            _ => vec![Job {
                point,
                seed,
                lambdas,
                class: None,
            }],
        };
        jobs.iter()
            .map(|j| Ok(CheckpointStore::open(self.job_dir(j))?))
            .collect()
    }

    fn generator_stores<'a>(&self, stores: &'a [CheckpointStore]) -> GeneratorStores<'a> {
        match self.generator_mode() {
            GeneratorMode::PerClass => GeneratorStores::PerClass(stores),
            GeneratorMode::Conditional => GeneratorStores::Conditional(&stores[0]),
        }
    }

    fn sweep_key(&self, point: usize, seed: u64, lambdas: Option<[f64; 2]>) -> SweepKey {
        SweepKey {
            config_id: self.points[point].label.clone(),
            site: 0,
            seed,
            lambdas: lambdas.map(|l| l.to_vec()).unwrap_or_default(),
            recipe: if lambdas.is_some() {
                RECIPE_FELICIA
            } else {
                RECIPE_GAN
            }
            .to_string(),
        }
    }

    fn classifier_spec(&self, seed: u64) -> UtilityClassifierSpec {
        UtilityClassifierSpec {
            seed,
            ..self.config.classifier.clone()
        }
    }

    fn synthetic_counts(&self, helpee: &ImageDataset) -> Vec<usize> {
        let fixed = match &self.config.experiment {
            ExperimentKind::Subgroup {
                synthetic_per_class,
                ..
            }
            | ExperimentKind::Lesion {
                synthetic_per_class,
                ..
            } => *synthetic_per_class,
            ExperimentKind::Coverage { .. } => None,
        };
        (0..self.data.n_classes())
            .map(|c| fixed.unwrap_or_else(|| helpee.classes().iter().filter(|&&k| k == c).count()))
            .collect()
    }

    fn training_mode(&self) -> TrainingMode {
        match &self.config.experiment {
            ExperimentKind::Subgroup { training, .. } | ExperimentKind::Lesion { training, .. } => {
                *training
            }
            ExperimentKind::Coverage { .. } => TrainingMode::Synthetic,
        }
    }

    /// Runs `f` on the store set of one training run.
    fn with_stores<T>(
        &self,
        point: usize,
        seed: u64,
        lambdas: Option<[f64; 2]>,
        f: impl Fn(GeneratorStores<'_>, &SweepKey) -> Result<T, EvalError>,
    ) -> anyhow::Result<T> {
        let stores = self.stores_for(point, seed, lambdas)?;
        Ok(f(
            self.generator_stores(&stores),
            &self.sweep_key(point, seed, lambdas),
        )?)
    }

    fn sweep(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        if !self.is_utility() {
            return Ok(());
        }
        let mut runs = Vec::new();
        for point in 0..self.points.len() {
            for &seed in &self.config.seeds {
                runs.push((point, seed, None));
                runs.extend(
                    self.config
                        .lambda_grid
                        .iter()
                        .map(|&l| (point, seed, Some(l))),
                );
            }
        }
        let one = |&(point, seed, lambdas): &(usize, u64, Option<[f64; 2]>)| -> anyhow::Result<Vec<UtilityReport>> {
            match self.sweep_run(point, seed, lambdas) {
                Err(e) if is_checkpoint_error(&e) => {
                    warn!("{e:#}; retraining {} seed {seed} {}", self.points[point].label, lambda_tag(lambdas));
                    for class in self.job_classes() {
                        self.train_job(&Job { point, seed, lambdas, class })?;
                    }
                    self.sweep_run(point, seed, lambdas)
                }
                other => other,
            }
        };
        let reports: Vec<Vec<UtilityReport>> = if self.config.deterministic {
            runs.iter().map(one).collect::<anyhow::Result<_>>()?
        } else {
            runs.par_iter().map(one).collect::<anyhow::Result<_>>()?
        };
        write_reports_csv(&self.path(VALIDATION_REPORTS), &reports.concat())?;
        manifest.add_artifact("validation_reports", VALIDATION_REPORTS);
        Ok(())
    }

    fn job_classes(&self) -> Vec<Option<usize>> {
        match self.generator_mode() {
            GeneratorMode::PerClass if self.is_utility() => {
                (0..self.data.n_classes()).map(Some).collect()
            }
            _ => vec![None],
        }
    }

    fn helpee_and_validation(
        &self,
        point: usize,
        seed: u64,
    ) -> anyhow::Result<(ImageDataset, ImageDataset, ImageDataset)> {
        let record = self.record(point, seed)?;
        Ok((
            self.data.subset(&record.partition.sites[0]),
            self.data.subset(&record.validation),
            self.data.subset(&record.test),
        ))
    }

    fn sweep_run(
        &self,
        point: usize,
        seed: u64,
        lambdas: Option<[f64; 2]>,
    ) -> anyhow::Result<Vec<UtilityReport>> {
        let (helpee, validation, _) = self.helpee_and_validation(point, seed)?;
        let counts = self.synthetic_counts(&helpee);
        let latent = self.config.gan.latent();
        let real = (self.training_mode() == TrainingMode::Augment).then_some(&helpee);
        let plan = SynthesisPlan {
            latent: &latent,
            shape: self.config.dataset.shape(),
            counts: &counts,
            real,
        };
        let spec = self.classifier_spec(seed);
        let cadence = self.config.eval_cadence;
        self.with_stores(point, seed, lambdas, |stores, key| {
            epoch_utility_sweep(stores, key, cadence, &plan, &validation, &spec)
        })
    }

    // ---- select ----------------------------------------------------------

    fn select(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        let mut selection = Selection::default();
        if self.is_utility() {
            let reports = read_reports_csv(&self.path(VALIDATION_REPORTS), Split::Validation)?;
            for point in &self.points {
                selection
                    .points
                    .insert(point.label.clone(), self.select_point(point, &reports)?);
            }
        }
        write_json(&self.path(SELECTION), &selection)?;
        manifest.add_artifact("selection", SELECTION);
        Ok(())
    }

    fn select_point(
        &self,
        point: &BiasPoint,
        reports: &[UtilityReport],
    ) -> anyhow::Result<PointSelection> {
        let k = self.config.ensemble_k;
        let of_run = |recipe: &str, lambdas: Option<[f64; 2]>, seed: u64| -> Vec<UtilityReport> {
            let want = lambdas.map(|l| l.to_vec()).unwrap_or_default();
            reports
                .iter()
                .filter(|r| {
                    r.config_id == point.label
                        && r.recipe == recipe
                        && r.seed == seed
                        && r.lambdas == want
                })
                .cloned()
                .collect()
        };
        let mut out = PointSelection::default();
        // Validation reports of the chosen epochs, per λ pair, pooled over seeds.
        let mut pooled: Vec<((f64, f64), Vec<UtilityReport>)> = Vec::new();
        let mut pooled_single: Vec<((f64, f64), Vec<UtilityReport>)> = Vec::new();
        for &seed in &self.config.seeds {
            let gan = of_run(RECIPE_GAN, None, seed);
            let epochs = select_top_epochs(&gan, k)?;
            out.runs.push(RunSelection {
                recipe: RECIPE_GAN.into(),
                lambdas: None,
                seed,
                epochs,
            });
        }
        for &l in &self.config.lambda_grid {
            let mut top = Vec::new();
            let mut single = Vec::new();
            for &seed in &self.config.seeds {
                let run = of_run(RECIPE_FELICIA, Some(l), seed);
                let epochs = select_top_epochs(&run, k)?;
                top.extend(
                    run.iter()
                        .filter(|r| r.epoch.is_some_and(|e| epochs.contains(&e)))
                        .cloned(),
                );
                let best = select_top_epochs(&run, 1)?;
                single.extend(
                    run.iter()
                        .filter(|r| r.epoch.is_some_and(|e| best.contains(&e)))
                        .cloned(),
                );
                out.runs.push(RunSelection {
                    recipe: RECIPE_FELICIA.into(),
                    lambdas: Some(l),
                    seed,
                    epochs,
                });
                if l[0] == l[1] {
                    out.runs.push(RunSelection {
                        recipe: RECIPE_PRIVGAN.into(),
                        lambdas: Some(l),
                        seed,
                        epochs: best,
                    });
                }
            }
            pooled.push(((l[0], l[1]), top));
            if l[0] == l[1] {
                pooled_single.push(((l[0], l[1]), single));
            }
        }
        let (a, b) = select_lambda(&pooled)?;
        out.felicia_lambdas = Some([a, b]);
        if self.privgan() && !pooled_single.is_empty() {
            let (a, b) = select_lambda(&pooled_single)?;
            out.privgan_lambdas = Some([a, b]);
        }
        Ok(out)
    }

    // ---- evaluate --------------------------------------------------------

    fn evaluate(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        if self.is_utility() {
            self.evaluate_utility(manifest)
        } else {
            self.evaluate_coverage(manifest)
        }
    }

    fn evaluate_utility(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        let bytes = std::fs::read(self.path(SELECTION))?;
        let selection: Selection = serde_json::from_slice(&bytes)?;
        let mut tasks = Vec::new();
        for (i, point) in self.points.iter().enumerate() {
            let sel = selection
                .points
                .get(&point.label)
                .ok_or_else(|| anyhow!("no selection for {}", point.label))?;
            for &seed in &self.config.seeds {
                tasks.push((i, seed, RECIPE_REAL, None));
                tasks.push((i, seed, RECIPE_GAN, None));
                tasks.push((i, seed, RECIPE_FELICIA, sel.felicia_lambdas));
                if let Some(l) = sel.privgan_lambdas {
                    tasks.push((i, seed, RECIPE_PRIVGAN, Some(l)));
                }
            }
        }
        let one = |&(point, seed, recipe, lambdas): &(usize, u64, &str, Option<[f64; 2]>)| -> anyhow::Result<UtilityReport> {
            let sel = &selection.points[&self.points[point].label];
            let epochs = match recipe {
                RECIPE_REAL => Vec::new(),
                _ => sel
                    .runs
                    .iter()
                    .find(|r| r.recipe == recipe && r.seed == seed && r.lambdas == lambdas)
                    .map(|r| r.epochs.clone())
                    .ok_or_else(|| anyhow!("no epoch selection for {recipe} seed {seed}"))?,
            };
            self.test_report(point, seed, recipe, lambdas, &epochs)
        };
        let reports: Vec<UtilityReport> = if self.config.deterministic {
            tasks.iter().map(one).collect::<anyhow::Result<_>>()?
        } else {
            tasks.par_iter().map(one).collect::<anyhow::Result<_>>()?
        };
        write_reports_csv(&self.path(FINAL_TEST_METRICS), &reports)?;
        manifest.add_artifact("final_test_metrics", FINAL_TEST_METRICS);
        Ok(())
    }

    fn test_report(
        &self,
        point: usize,
        seed: u64,
        recipe: &str,
        lambdas: Option<[f64; 2]>,
        epochs: &[u64],
    ) -> anyhow::Result<UtilityReport> {
        let (helpee, _, test) = self.helpee_and_validation(point, seed)?;
        let spec = self.classifier_spec(seed);
        let train = if recipe == RECIPE_REAL {
            helpee
        } else {
            let counts = self.synthetic_counts(&helpee);
            let latent = self.config.gan.latent();
            let real = (self.training_mode() == TrainingMode::Augment).then_some(&helpee);
            let plan = SynthesisPlan {
                latent: &latent,
                shape: self.config.dataset.shape(),
                counts: &counts,
                real,
            };
            self.with_stores(point, seed, lambdas, |stores, key| {
                utility_training_set(stores, key, &plan, epochs, seed)
            })?
        };
        let e = evaluate(&train_utility_classifier(&train, &spec)?, &test)?;
        Ok(UtilityReport {
            config_id: self.points[point].label.clone(),
            lambdas: lambdas.map(|l| l.to_vec()).unwrap_or_default(),
            epoch: if epochs.len() == 1 {
                Some(epochs[0])
            } else {
                None
            },
            seed,
            recipe: recipe.to_string(),
            split: Split::Test,
            auc: e.auc,
            acc_overall: e.acc_overall,
            per_subgroup: e.per_subgroup,
        })
    }

    fn evaluate_coverage(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        let ExperimentKind::Coverage { n_generated, .. } = self.config.experiment else {
            unreachable!("coverage only")
        };
        let split = self.cluster_split()?;
        let latent = self.config.gan.latent();
        let last = *self
            .config
            .checkpoint_epochs()
            .last()
            .expect("validated cadence");
        std::fs::create_dir_all(self.path("coverage"))?;
        let mut rows = Vec::new();
        for (i, point) in self.points.iter().enumerate() {
            for &seed in &self.config.seeds {
                let record = self.record(i, seed)?;
                let mut runs: Vec<Option<[f64; 2]>> = vec![None];
                runs.extend(self.config.lambda_grid.iter().map(|&l| Some(l)));
                for lambdas in runs {
                    let store = CheckpointStore::open(self.job_dir(&Job {
                        point: i,
                        seed,
                        lambdas,
                        class: None,
                    }))?;
                    for (site, shard) in record.partition.sites.iter().enumerate() {
                        let ones = shard.iter().filter(|&&j| split.assignments[j] == 1).count();
                        // The cluster this site's shard holds fewer of.
                        let minority = if 2 * ones <= shard.len() { 1 } else { 2 };
                        let id = store
                            .epochs_for(site, seed)
                            .into_iter()
                            .find(|(e, _)| *e == last)
                            .map(|(_, id)| id)
                            .ok_or_else(|| anyhow!("missing final checkpoint for site {site}"))?;
                        let generator = store.load(&id)?;
                        let mut r = rng::stream(seed, "coverage-samples", site as u64);
                        let samples = generate(&generator, &latent, n_generated, None, &mut r)?;
                        let stats =
                            coverage_stats(&samples, &split.basis, &split.centroids, minority)?;
                        let recipe = if lambdas.is_some() {
                            RECIPE_FELICIA
                        } else {
                            RECIPE_GAN
                        };
                        let tag = lambda_tag(lambdas);
                        let rel = PathBuf::from("coverage")
                            .join(format!("{}_seed{seed}_{tag}_site{site}.csv", point.label));
                        write_coverage_csv(
                            &self.path(&rel),
                            &[(&format!("{recipe}_site{site}"), &stats.coords)],
                        )?;
                        manifest.add_artifact(
                            format!("coverage/{}/seed{seed}/{tag}/site{site}", point.label),
                            rel,
                        );
                        rows.push(CoverageRow {
                            config_id: point.label.clone(),
                            alpha: point.value,
                            seed,
                            recipe: recipe.to_string(),
                            lambda1: lambdas.map(|l| l[0]),
                            lambda2: lambdas.map(|l| l[1]),
                            site,
                            minority_cluster: minority,
                            minority_fraction: stats.minority_fraction,
                            count_cluster1: stats.counts[0],
                            count_cluster2: stats.counts[1],
                        });
                    }
                }
            }
        }
        write_csv(&self.path(COVERAGE_METRICS), &rows)?;
        manifest.add_artifact("coverage_metrics", COVERAGE_METRICS);
        Ok(())
    }

    // ---- aggregate -------------------------------------------------------

    fn aggregate(&self, manifest: &mut RunManifest) -> anyhow::Result<()> {
        let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
        if self.is_utility() {
            for r in read_reports_csv(&self.path(FINAL_TEST_METRICS), Split::Test)? {
                let mut push = |metric: String, v: f64| {
                    groups
                        .entry((r.config_id.clone(), r.recipe.clone(), metric))
                        .or_default()
                        .push(v)
                };
                push("auc".into(), r.auc);
                push("acc_overall".into(), r.acc_overall);
                push("acc_gap".into(), subgroup_gap(&r));
                for (name, v) in &r.per_subgroup {
                    push(format!("acc_{name}"), *v);
                }
            }
        } else {
            for r in read_csv::<CoverageRow>(&self.path(COVERAGE_METRICS))? {
                let recipe = format!("{}_site{}", r.recipe, r.site);
                groups
                    .entry((r.config_id.clone(), recipe, "minority_fraction".into()))
                    .or_default()
                    .push(r.minority_fraction);
            }
        }
        let mut rows = Vec::new();
        for ((config_id, recipe, metric), values) in groups {
            let a = aggregate_runs(&values)?;
            rows.push(AggregateRow {
                config_id,
                recipe,
                metric,
                n: a.n,
                median: a.median,
                lower_quartile: a.lower_quartile,
                upper_quartile: a.upper_quartile,
                whisker_low: a.whisker_low,
                whisker_high: a.whisker_high,
            });
        }
        write_csv(&self.path(AGGREGATE), &rows)?;
        manifest.add_artifact("aggregate", AGGREGATE);
        Ok(())
    }
}

/// Max minus min subgroup accuracy of a report.
pub fn subgroup_gap(r: &UtilityReport) -> f64 {
    let v: Vec<f64> = r.per_subgroup.values().copied().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn is_checkpoint_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<CheckpointError>().is_some()
            || matches!(
                c.downcast_ref::<EvalError>(),
                Some(EvalError::Checkpoint(_) | EvalError::MissingCheckpoint { .. })
            )
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub config_id: String,
    pub alpha: f64,
    pub seed: u64,
    pub recipe: String,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub site: usize,
    pub minority_cluster: u8,
    pub minority_fraction: f64,
    pub count_cluster1: usize,
    pub count_cluster2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_id: String,
    pub recipe: String,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(rows)
}
