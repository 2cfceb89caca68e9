//! Synthetic-data utility: downstream classifiers, ranking and subgroup
//! metrics, checkpoint sweeps, epoch and λ selection, run aggregation and
//! coverage of a stored principal plane.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, CheckpointStore};
use crate::data::{DataError, ImageDataset};
use crate::gan::{GanError, LatentPrior};
use crate::nn::{
    argmax_rows, softmax_rows, Activation, Architecture, LayerSpec, Network, NnError, Optimizer,
    OptimizerKind, Shape,
};
use crate::partition::{nearest_centroid, PartitionError, PcaBasis};
use crate::rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("both classes must be present in the ground truth")]
    SingleClassTruth,
    #[error("training set holds a single class")]
    SingleClassTraining,
    #[error("score and truth lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("subgroup `{0}` has no evaluation samples")]
    EmptySubgroup(String),
    #[error("no generator covers class {0}")]
    MissingClass(usize),
    #[error("no checkpoints supplied")]
    NoCheckpoints,
    #[error("generator emits {got} values per sample, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("missing checkpoint for site {site} at epoch {epoch}")]
    MissingCheckpoint { site: usize, epoch: u64 },
    #[error("need {needed} reports, got {got}")]
    TooFewReports { needed: usize, got: usize },
    #[error("selection received a test-split report ({0})")]
    TestReport(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("csv {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// Generator parameters captured at one epoch.
#[derive(Clone, Debug)]
pub struct GeneratorCheckpoint {
    pub epoch: u64,
    pub network: Network,
}

/// One conditional generator per checkpoint, or one list of unconditional
/// checkpoints per class.
#[derive(Clone, Debug)]
pub enum GeneratorSet {
    Conditional(Vec<GeneratorCheckpoint>),
    PerClass(Vec<Vec<GeneratorCheckpoint>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub site: usize,
    pub epochs: Vec<u64>,
    pub seed: u64,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub data: ImageDataset,
    pub provenance: SyntheticProvenance,
}

/// Splits `n` over checkpoints sorted by epoch, earliest first taking the
/// remainder.
fn shares(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn sorted(mut ckpts: Vec<&GeneratorCheckpoint>) -> Vec<&GeneratorCheckpoint> {
    ckpts.sort_by_key(|c| c.epoch);
    ckpts
}

/// Exactly `n_per_class` images per class, pooled equally across the
/// supplied checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn generate_per_class(
    generators: &GeneratorSet,
    latent: &LatentPrior,
    shape: Shape,
    n_classes: usize,
    n_per_class: usize,
    seed: u64,
    site: usize,
    lambdas: &[f64],
) -> Result<SyntheticSet, EvalError> {
    generate_class_counts(
        generators,
        latent,
        shape,
        &vec![n_per_class; n_classes],
        seed,
        site,
        lambdas,
    )
}

/// `counts[c]` images of class `c`, pooled equally across the supplied
/// checkpoints.
pub fn generate_class_counts(
    generators: &GeneratorSet,
    latent: &LatentPrior,
    shape: Shape,
    counts: &[usize],
    seed: u64,
    site: usize,
    lambdas: &[f64],
) -> Result<SyntheticSet, EvalError> {
    let mut rng = rng::stream(seed, "generate-per-class", site as u64);
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    let mut classes = Vec::new();
    let mut epochs = Vec::new();
    for (class, &n_class) in counts.iter().enumerate() {
        let ckpts = match generators {
            GeneratorSet::Conditional(c) => {
                for g in c {
                    if g.network.n_classes().is_none_or(|k| class >= k) {
                        return Err(EvalError::MissingClass(class));
                    }
                }
                sorted(c.iter().collect())
            }
            GeneratorSet::PerClass(per) => sorted(
                per.get(class)
                    .ok_or(EvalError::MissingClass(class))?
                    .iter()
                    .collect(),
            ),
        };
        if ckpts.is_empty() {
            return Err(EvalError::NoCheckpoints);
        }
        for (g, count) in ckpts.iter().zip(shares(n_class, ckpts.len())) {
            if g.network.output_shape().len() != shape.len() {
                return Err(EvalError::ShapeMismatch {
                    expected: shape.len(),
                    got: g.network.output_shape().len(),
                });
            }
            if !epochs.contains(&g.epoch) {
                epochs.push(g.epoch);
            }
            let labels = vec![class; count];
            let conditional = matches!(generators, GeneratorSet::Conditional(_));
            let out = crate::gan::generate(
                &g.network,
                latent,
                count,
                conditional.then_some(labels.as_slice()),
                &mut rng,
            )?;
            blocks.push(out);
            classes.extend(labels);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let images = if views.is_empty() {
        Array2::zeros((0, shape.len()))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("one shape")
    };
    epochs.sort_unstable();
    let data = ImageDataset::new(
        images,
        shape,
        classes,
        None,
        format!("synthetic site {site}"),
    )?;
    Ok(SyntheticSet {
        data,
        provenance: SyntheticProvenance {
            site,
            epochs,
            seed,
            lambdas: lambdas.to_vec(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityClassifierSpec {
    /// Hidden layers; a dense logit head sized to the class count is appended.
    #[serde(default = "default_classifier_layers")]
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_classifier_epochs")]
    pub epochs: usize,
    #[serde(default = "default_classifier_batch")]
    pub batch_size: usize,
    #[serde(default = "default_classifier_step")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classifier_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(32, 3, 2, 1),
        LayerSpec::act(Activation::Relu),
        LayerSpec::conv(64, 3, 2, 1),
        LayerSpec::act(Activation::Relu),
        LayerSpec::dense(128),
        LayerSpec::act(Activation::Relu),
    ]
}

fn default_classifier_epochs() -> usize {
    30
}

fn default_classifier_batch() -> usize {
    64
}

fn default_classifier_step() -> f64 {
    1e-3
}

impl Default for UtilityClassifierSpec {
    fn default() -> Self {
        Self {
            layers: default_classifier_layers(),
            epochs: default_classifier_epochs(),
            batch_size: default_classifier_batch(),
            step_size: default_classifier_step(),
            seed: 0,
        }
    }
}

/// Softmax classifier over flattened images.
#[derive(Clone, Debug)]
pub struct Classifier {
    network: Network,
}

impl Classifier {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn n_classes(&self) -> usize {
        self.network.output_shape().len()
    }

    pub fn probabilities(&self, x: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
        let mut out = Array2::zeros((x.nrows(), self.n_classes()));
        for start in (0..x.nrows()).step_by(512) {
            let end = (start + 512).min(x.nrows());
            let p = softmax_rows(
                self.network
                    .predict(&x.slice(ndarray::s![start..end, ..]).to_owned(), None)?,
            );
            out.slice_mut(ndarray::s![start..end, ..]).assign(&p);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>, EvalError> {
        Ok(argmax_rows(&self.probabilities(x)?))
    }
}

/// Mini-batch Adam on cross-entropy; batches reshuffle every epoch from the
/// spec seed.
pub fn train_utility_classifier(
    train: &ImageDataset,
    spec: &UtilityClassifierSpec,
) -> Result<Classifier, EvalError> {
    let n_classes = train.n_classes();
    let distinct = train
        .classes()
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Err(EvalError::SingleClassTraining);
    }
    let mut layers = spec.layers.clone();
    layers.push(LayerSpec::dense(n_classes));
    let arch = Architecture {
        input: train.shape(),
        layers,
        conditioning: None,
    };
    let mut network = Network::new(arch, &mut rng::stream(spec.seed, "classifier-init", 0))?;
    let mut opt = Optimizer::new(
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        },
        network.n_params(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(spec.seed, "classifier-batches", 0);
    let bs = spec.batch_size.max(1);
    let mut grads = vec![0.0; network.n_params()];
    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(bs) {
            let x = train.images().select(Axis(0), chunk);
            let (logits, tape) = network.forward(&x, None)?;
            let mut g = softmax_rows(logits);
            for (r, &i) in chunk.iter().enumerate() {
                g[[r, train.classes()[i]]] -= 1.0;
            }
            g /= chunk.len() as f64;
            grads.iter_mut().for_each(|v| *v = 0.0);
            network.backward(&tape, g, Some(&mut grads));
            opt.descend(network.params_mut(), &grads, spec.step_size);
        }
    }
    Ok(Classifier { network })
}

/// Mann–Whitney estimate of the ROC area: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc_roc(scores: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::Length(scores.len(), truth.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassTruth);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of `subgroup`'s samples whose prediction equals the class.
pub fn subgroup_accuracy(
    predictions: &[usize],
    eval: &ImageDataset,
    subgroup: &str,
) -> Result<f64, EvalError> {
    let id = eval
        .subgroup_id(subgroup)
        .ok_or_else(|| EvalError::EmptySubgroup(subgroup.into()))?;
    let tags = eval.subgroups().expect("named subgroup implies tags");
    let (mut hit, mut n) = (0usize, 0usize);
    for i in (0..eval.len()).filter(|&i| tags[i] == id) {
        n += 1;
        hit += usize::from(predictions[i] == eval.classes()[i]);
    }
    if n == 0 {
        return Err(EvalError::EmptySubgroup(subgroup.into()));
    }
    Ok(hit as f64 / n as f64)
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> f64 {
    let hit = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    hit as f64 / truth.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub config_id: String,
    pub lambdas: Vec<f64>,
    pub epoch: Option<u64>,
    pub seed: u64,
    pub recipe: String,
    pub split: Split,
    pub auc: f64,
    pub acc_overall: f64,
    pub per_subgroup: BTreeMap<String, f64>,
}

/// Metrics of a trained classifier on a labeled evaluation set. The AUC
/// scores class 1 as positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub auc: f64,
    pub acc_overall: f64,
    pub per_subgroup: BTreeMap<String, f64>,
}

pub fn evaluate(classifier: &Classifier, eval: &ImageDataset) -> Result<Evaluation, EvalError> {
    let p = classifier.probabilities(eval.images())?;
    let predictions = argmax_rows(&p);
    let truth: Vec<bool> = eval.classes().iter().map(|&c| c == 1).collect();
    let auc = auc_roc(&p.column(1).to_vec(), &truth)?;
    let mut per_subgroup = BTreeMap::new();
    if let Some(tags) = eval.subgroups() {
        for (id, name) in eval.subgroup_names().iter().enumerate() {
            if tags.contains(&id) {
                per_subgroup.insert(name.clone(), subgroup_accuracy(&predictions, eval, name)?);
            }
        }
    }
    Ok(Evaluation {
        auc,
        acc_overall: accuracy(&predictions, eval.classes()),
        per_subgroup,
    })
}

/// Identifies reports produced by one sweep.
#[derive(Clone, Debug)]
pub struct SweepKey {
    pub config_id: String,
    pub site: usize,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub recipe: String,
}

/// Checkpoints of one conditional generator, or of one unconditional
/// generator per class (store `c` holds class `c`).
#[derive(Clone, Copy, Debug)]
pub enum GeneratorStores<'a> {
    Conditional(&'a CheckpointStore),
    PerClass(&'a [CheckpointStore]),
}

impl GeneratorStores<'_> {
    /// Epochs checkpointed for `site` and `seed` in every store.
    pub fn epochs(&self, site: usize, seed: u64) -> Vec<u64> {
        let list = |s: &CheckpointStore| {
            s.epochs_for(site, seed)
                .into_iter()
                .map(|(e, _)| e)
                .collect::<Vec<_>>()
        };
        match self {
            Self::Conditional(s) => list(s),
            Self::PerClass(stores) => {
                let Some((first, rest)) = stores.split_first() else {
                    return Vec::new();
                };
                let mut epochs = list(first);
                for s in rest {
                    let other = list(s);
                    epochs.retain(|e| other.contains(e));
                }
                epochs
            }
        }
    }

    /// Loads the generators of `site` and `seed` at `epochs`.
    pub fn load(&self, site: usize, seed: u64, epochs: &[u64]) -> Result<GeneratorSet, EvalError> {
        let load_from = |store: &CheckpointStore| -> Result<Vec<GeneratorCheckpoint>, EvalError> {
            let available: BTreeMap<u64, _> = store.epochs_for(site, seed).into_iter().collect();
            epochs
                .iter()
                .map(|&epoch| {
                    let id = available
                        .get(&epoch)
                        .ok_or(EvalError::MissingCheckpoint { site, epoch })?;
                    Ok(GeneratorCheckpoint {
                        epoch,
                        network: store.load(id)?,
                    })
                })
                .collect()
        };
        Ok(match self {
            Self::Conditional(s) => GeneratorSet::Conditional(load_from(s)?),
            Self::PerClass(stores) => {
                GeneratorSet::PerClass(stores.iter().map(load_from).collect::<Result<_, _>>()?)
            }
        })
    }
}

/// How a utility training set is assembled from generators.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisPlan<'a> {
    pub latent: &'a LatentPrior,
    pub shape: Shape,
    /// Synthetic images per class.
    pub counts: &'a [usize],
    /// Real images placed ahead of the synthetic ones, if any.
    pub real: Option<&'a ImageDataset>,
}

/// Synthetic images from the generators at `epochs`, prefixed by the
/// plan's real images.
pub fn utility_training_set(
    stores: GeneratorStores<'_>,
    key: &SweepKey,
    plan: &SynthesisPlan<'_>,
    epochs: &[u64],
    seed: u64,
) -> Result<ImageDataset, EvalError> {
    let set = stores.load(key.site, key.seed, epochs)?;
    let synth = generate_class_counts(
        &set,
        plan.latent,
        plan.shape,
        plan.counts,
        seed,
        key.site,
        &key.lambdas,
    )?;
    Ok(match plan.real {
        Some(real) => real.concat(&synth.data)?,
        None => synth.data,
    })
}

/// One validation report per checkpointed epoch that is a positive
/// multiple of `cadence`, up to the last checkpoint.
pub fn epoch_utility_sweep(
    stores: GeneratorStores<'_>,
    key: &SweepKey,
    cadence: u64,
    plan: &SynthesisPlan<'_>,
    validation: &ImageDataset,
    spec: &UtilityClassifierSpec,
) -> Result<Vec<UtilityReport>, EvalError> {
    let available = stores.epochs(key.site, key.seed);
    let Some(&last) = available.last() else {
        warn!(
            "no checkpoints for site {} seed {}; sweep is empty",
            key.site, key.seed
        );
        return Ok(Vec::new());
    };
    let cadence = cadence.max(1);
    let mut reports = Vec::new();
    for epoch in (cadence..=last).step_by(cadence as usize) {
        if !available.contains(&epoch) {
            return Err(EvalError::MissingCheckpoint {
                site: key.site,
                epoch,
            });
        }
        let train =
            utility_training_set(stores, key, plan, &[epoch], key.seed.wrapping_add(epoch))?;
        let e = evaluate(&train_utility_classifier(&train, spec)?, validation)?;
        reports.push(UtilityReport {
            config_id: key.config_id.clone(),
            lambdas: key.lambdas.clone(),
            epoch: Some(epoch),
            seed: key.seed,
            recipe: key.recipe.clone(),
            split: Split::Validation,
            auc: e.auc,
            acc_overall: e.acc_overall,
            per_subgroup: e.per_subgroup,
        });
    }
    Ok(reports)
}

fn require_validation(reports: &[UtilityReport]) -> Result<(), EvalError> {
    match reports.iter().find(|r| r.split == Split::Test) {
        Some(r) => Err(EvalError::TestReport(format!(
            "{} epoch {:?}",
            r.config_id, r.epoch
        ))),
        None => Ok(()),
    }
}

/// The `k` epochs with the highest validation AUC, ties to the later epoch.
pub fn select_top_epochs(reports: &[UtilityReport], k: usize) -> Result<Vec<u64>, EvalError> {
    require_validation(reports)?;
    let mut ranked: Vec<(f64, u64)> = reports
        .iter()
        .filter_map(|r| r.epoch.map(|e| (r.auc, e)))
        .collect();
    if ranked.len() < k {
        return Err(EvalError::TooFewReports {
            needed: k,
            got: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    Ok(ranked.into_iter().take(k).map(|(_, e)| e).collect())
}

/// Median of `values` with linear interpolation.
pub fn median(values: &[f64]) -> Option<f64> {
    aggregate_runs(values).ok().map(|a| a.median)
}

/// The λ pair with the highest median validation AUC; ties go to the
/// lexicographically smallest pair.
pub fn select_lambda(grid: &[((f64, f64), Vec<UtilityReport>)]) -> Result<(f64, f64), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Empty("lambda grid"));
    }
    let mut best: Option<((f64, f64), f64)> = None;
    for (pair, reports) in grid {
        require_validation(reports)?;
        let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
        let m = median(&aucs).ok_or(EvalError::Empty("lambda grid point"))?;
        let better = match best {
            None => true,
            Some((p, b)) => m > b || (m == b && (pair.0, pair.1) < p),
        };
        if better {
            best = Some((*pair, m));
        }
    }
    Ok(best.expect("non-empty grid").0)
}

/// Box statistics of repeated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n: usize,
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Quantile `q` of sorted values, interpolating at position `q · (n − 1)`.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty("run group"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(RunAggregate {
        n: v.len(),
        median: quantile_sorted(&v, 0.5),
        lower_quartile: quantile_sorted(&v, 0.25),
        upper_quartile: quantile_sorted(&v, 0.75),
        whisker_low: v[0],
        whisker_high: v[v.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageStats {
    /// Share of samples nearest the cluster the generator's shard lacked.
    pub minority_fraction: f64,
    /// Nearest-centroid counts for clusters 1 and 2.
    pub counts: [usize; 2],
    pub coords: Vec<[f64; 2]>,
}

/// Projects samples into the stored plane and counts nearest centroids.
/// `minority_cluster` is 1 or 2.
pub fn coverage_stats(
    generated: &Array2<f64>,
    basis: &PcaBasis,
    centroids: &[[f64; 2]; 2],
    minority_cluster: u8,
) -> Result<CoverageStats, EvalError> {
    if !(1..=2).contains(&minority_cluster) {
        return Err(PartitionError::OutOfRange(format!("cluster {minority_cluster}")).into());
    }
    if centroids.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PartitionError::Invalid("centroids must be finite".into()).into());
    }
    let proj = basis.project(generated)?;
    let coords: Vec<[f64; 2]> = proj.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let mut counts = [0usize; 2];
    coords
        .iter()
        .for_each(|&p| counts[nearest_centroid(p, centroids)] += 1);
    let minority_fraction =
        counts[minority_cluster as usize - 1] as f64 / coords.len().max(1) as f64;
    Ok(CoverageStats {
        minority_fraction,
        counts,
        coords,
    })
}

fn csv_err(path: &Path) -> impl Fn(String) -> EvalError + '_ {
    move |reason| EvalError::Csv {
        path: path.display().to_string(),
        reason,
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), EvalError> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| err(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    crate::checkpoint::write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
}

/// Subgroup names across a report set, sorted.
pub fn subgroup_columns(reports: &[UtilityReport]) -> Vec<String> {
    let mut names: Vec<String> = reports
        .iter()
        .flat_map(|r| r.per_subgroup.keys().cloned())
        .collect();
    names.sort();
    names.dedup();
    names
}

/// `config_id,lambda1,lambda2,epoch,seed,recipe,auc,acc_overall,acc_<subgroup>...`
pub fn write_reports_csv(path: &Path, reports: &[UtilityReport]) -> Result<(), EvalError> {
    let groups = subgroup_columns(reports);
    let mut header: Vec<String> = [
        "config_id",
        "lambda1",
        "lambda2",
        "epoch",
        "seed",
        "recipe",
        "auc",
        "acc_overall",
    ]
    .map(String::from)
    .to_vec();
    header.extend(groups.iter().map(|g| format!("acc_{g}")));
    let fmt = |v: f64| format!("{v}");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.config_id.clone(),
                r.lambdas.first().map_or(String::new(), |&v| fmt(v)),
                r.lambdas.get(1).map_or(String::new(), |&v| fmt(v)),
                r.epoch.map_or(String::new(), |e| e.to_string()),
                r.seed.to_string(),
                r.recipe.clone(),
                fmt(r.auc),
                fmt(r.acc_overall),
            ];
            row.extend(
                groups
                    .iter()
                    .map(|g| r.per_subgroup.get(g).map_or(String::new(), |&v| fmt(v))),
            );
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Reads a file written by [`write_reports_csv`], tagging every row `split`.
pub fn read_reports_csv(path: &Path, split: Split) -> Result<Vec<UtilityReport>, EvalError> {
    let err = csv_err(path);
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let required = [
        "config_id",
        "lambda1",
        "lambda2",
        "epoch",
        "seed",
        "recipe",
        "auc",
        "acc_overall",
    ];
    if header.len() < required.len() || header[..required.len()] != required {
        return Err(err(format!("missing metric columns, found {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let mut lambdas = Vec::new();
        for s in [&rec[1], &rec[2]] {
            if !s.is_empty() {
                lambdas.push(num(s)?);
            }
        }
        let mut per_subgroup = BTreeMap::new();
        for (name, v) in header[required.len()..]
            .iter()
            .zip(rec.iter().skip(required.len()))
        {
            if !v.is_empty() {
                per_subgroup.insert(name.trim_start_matches("acc_").to_string(), num(v)?);
            }
        }
        out.push(UtilityReport {
            config_id: rec[0].to_string(),
            lambdas,
            epoch: if rec[3].is_empty() {
                None
            } else {
                Some(num(&rec[3])? as u64)
            },
            seed: rec[4].parse().map_err(|e| err(format!("seed: {e}")))?,
            recipe: rec[5].to_string(),
            split,
            auc: num(&rec[6])?,
            acc_overall: num(&rec[7])?,
            per_subgroup,
        });
    }
    Ok(out)
}

/// `x,y,source` rows for scatter plots.
pub fn write_coverage_csv(path: &Path, series: &[(&str, &[[f64; 2]])]) -> Result<(), EvalError> {
    let header = ["x", "y", "source"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = series
        .iter()
        .flat_map(|(name, pts)| {
            pts.iter()
                .map(move |p| vec![format!("{}", p[0]), format!("{}", p[1]), name.to_string()])
        })
        .collect();
    write_rows(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// All (positive, negative) pairs, ties worth one half.
    fn auc_pairs(scores: &[f64], truth: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if truth[i] && !truth[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let t = [true, true, false, false];
        assert_eq!(auc_roc(&[0.9, 0.8, 0.7, 0.1], &t).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.9, 0.4, 0.6, 0.1], &t).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.5, 0.5, 0.5, 0.5], &t).unwrap(), 0.5);
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClassTruth)
        ));
        assert!(matches!(
            auc_roc(&[0.1], &[true, false]),
            Err(EvalError::Length(1, 2))
        ));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(v in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64 / 7.0).collect();
            let truth: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let a = auc_roc(&scores, &truth).unwrap();
            prop_assert!((a - auc_pairs(&scores, &truth)).abs() < 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
            prop_assert!((auc_roc(&transformed, &truth).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn auc_complement(seed in any::<u64>(), n in 4usize..50) {
            let mut r = rng::stream(seed, "auc", 0);
            let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let mut truth: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
            truth[0] = true;
            truth[1] = false;
            let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let sum = auc_roc(&scores, &truth).unwrap() + auc_roc(&flipped, &truth).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn quartiles_match_sort_oracle(v in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let a = aggregate_runs(&v).unwrap();
            let mut s = v.clone();
            s.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let at = |q: f64| {
                let h = (s.len() - 1) as f64 * q;
                let i = h as usize;
                if i + 1 < s.len() { s[i] + (h - i as f64) * (s[i + 1] - s[i]) } else { s[i] }
            };
            prop_assert!((a.median - at(0.5)).abs() < 1e-12);
            prop_assert!((a.lower_quartile - at(0.25)).abs() < 1e-12);
            prop_assert!((a.upper_quartile - at(0.75)).abs() < 1e-12);
            prop_assert!(a.lower_quartile <= a.median && a.median <= a.upper_quartile);
            prop_assert_eq!((a.whisker_low, a.whisker_high), (s[0], s[s.len() - 1]));
        }
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_runs(&[0.1, 0.2, 0.3]).unwrap().median - 0.2).abs() < 1e-15);
        let one = aggregate_runs(&[0.4]).unwrap();
        assert_eq!(
            [
                one.median,
                one.lower_quartile,
                one.upper_quartile,
                one.whisker_low,
                one.whisker_high
            ],
            [0.4; 5]
        );
        assert!(matches!(aggregate_runs(&[]), Err(EvalError::Empty(_))));
    }

    fn tagged(classes: Vec<usize>, tags: Vec<usize>) -> ImageDataset {
        let names = ["a", "b", "c"].map(String::from).to_vec();
        let n = classes.len();
        ImageDataset::new(
            Array2::zeros((n, 1)),
            Shape::flat(1),
            classes,
            Some((tags, names)),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn subgroup_accuracy_examples() {
        let ds = tagged(vec![0, 0, 1, 1], vec![0, 0, 1, 2]);
        assert_eq!(subgroup_accuracy(&[0, 0, 1, 1], &ds, "a").unwrap(), 1.0);
        assert_eq!(subgroup_accuracy(&[1, 1, 1, 1], &ds, "a").unwrap(), 0.0);
        let empty = tagged(vec![0, 0], vec![0, 0]);
        assert!(matches!(
            subgroup_accuracy(&[0, 0], &empty, "c"),
            Err(EvalError::EmptySubgroup(_))
        ));
    }

    proptest! {
        #[test]
        fn overall_is_weighted_subgroup_mean(v in proptest::collection::vec((0usize..3, 0usize..2), 1..80)) {
            let tags: Vec<usize> = v.iter().map(|p| p.0).collect();
            let classes: Vec<usize> = tags.iter().map(|&t| usize::from(t == 2)).collect();
            let preds: Vec<usize> = v.iter().map(|p| p.1).collect();
            let ds = tagged(classes.clone(), tags.clone());
            let mut weighted = 0.0;
            for (id, name) in ["a", "b", "c"].iter().enumerate() {
                let size = tags.iter().filter(|&&t| t == id).count();
                if size > 0 {
                    weighted += size as f64 * subgroup_accuracy(&preds, &ds, name).unwrap();
                }
            }
            prop_assert!((weighted / tags.len() as f64 - accuracy(&preds, &classes)).abs() < 1e-12);
        }
    }

    fn report(epoch: u64, auc: f64, split: Split) -> UtilityReport {
        UtilityReport {
            config_id: "c".into(),
            lambdas: vec![1.0, 0.0],
            epoch: Some(epoch),
            seed: 0,
            recipe: "felicia".into(),
            split,
            auc,
            acc_overall: auc,
            per_subgroup: BTreeMap::new(),
        }
    }

    #[test]
    fn top_epoch_selection() {
        let reports: Vec<_> = [(50, 0.6), (100, 0.8), (150, 0.7), (200, 0.8)]
            .iter()
            .map(|&(e, a)| report(e, a, Split::Validation))
            .collect();
        assert_eq!(select_top_epochs(&reports, 1).unwrap(), vec![200]);
        let mut reversed = reports.clone();
        reversed.reverse();
        assert_eq!(
            select_top_epochs(&reversed, 3).unwrap(),
            select_top_epochs(&reports, 3).unwrap()
        );
        let flat: Vec<_> = (1..=8)
            .map(|e| report(e * 50, 0.5, Split::Validation))
            .collect();
        assert_eq!(
            select_top_epochs(&flat, 5).unwrap(),
            vec![400, 350, 300, 250, 200]
        );
        assert!(matches!(
            select_top_epochs(&reports, 5),
            Err(EvalError::TooFewReports { needed: 5, got: 4 })
        ));
        let mut leaked = reports.clone();
        leaked.push(report(250, 0.9, Split::Test));
        assert!(matches!(
            select_top_epochs(&leaked, 1),
            Err(EvalError::TestReport(_))
        ));
    }

    #[test]
    fn lambda_selection() {
        let cell = |aucs: &[f64]| {
            aucs.iter()
                .map(|&a| report(50, a, Split::Validation))
                .collect::<Vec<_>>()
        };
        let single = vec![((1.0, 0.0), cell(&[0.6]))];
        assert_eq!(select_lambda(&single).unwrap(), (1.0, 0.0));
        let grid = vec![
            ((0.0, 0.0), cell(&[0.5, 0.6, 0.55])),
            ((2.0, 0.5), cell(&[0.7, 0.72, 0.4])),
            ((1.0, 1.0), cell(&[0.6, 0.6])),
        ];
        assert_eq!(select_lambda(&grid).unwrap(), (2.0, 0.5));
        let mut reversed = grid.clone();
        reversed.reverse();
        assert_eq!(select_lambda(&reversed).unwrap(), (2.0, 0.5));
        assert!(matches!(select_lambda(&[]), Err(EvalError::Empty(_))));
        let leaked = vec![((1.0, 0.0), vec![report(50, 0.6, Split::Test)])];
        assert!(matches!(
            select_lambda(&leaked),
            Err(EvalError::TestReport(_))
        ));
    }

    #[test]
    fn coverage_examples() {
        let basis = PcaBasis {
            mean: vec![0.0, 0.0],
            components: [vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let centroids = [[-1.0, 0.0], [1.0, 0.0]];
        let left = Array2::from_shape_vec((3, 2), vec![-1.0, 0.1, -0.8, 0.0, -1.2, -0.3]).unwrap();
        assert_eq!(
            coverage_stats(&left, &basis, &centroids, 2)
                .unwrap()
                .minority_fraction,
            0.0
        );
        let mix =
            Array2::from_shape_vec((4, 2), vec![-1.0, 0.0, 1.0, 0.0, -0.5, 0.2, 0.7, 0.1]).unwrap();
        let c = coverage_stats(&mix, &basis, &centroids, 2).unwrap();
        assert_eq!(c.minority_fraction, 0.5);
        assert_eq!(c.counts, [2, 2]);
        assert!(coverage_stats(&Array2::zeros((1, 3)), &basis, &centroids, 2).is_err());
    }

    #[test]
    fn reports_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = report(50, 0.625, Split::Validation);
        a.per_subgroup.insert("melanoma".into(), 0.5);
        let mut b = report(100, 0.75, Split::Validation);
        b.per_subgroup.insert("nevi".into(), 0.25);
        let path = dir.path().join("r.csv");
        write_reports_csv(&path, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "config_id,lambda1,lambda2,epoch,seed,recipe,auc,acc_overall,acc_melanoma,acc_nevi"
        ));
        assert_eq!(
            read_reports_csv(&path, Split::Validation).unwrap(),
            vec![a, b]
        );
    }

    fn stripes(n: usize, seed: u64) -> ImageDataset {
        let mut r = rng::stream(seed, "stripes", 0);
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let images = Array2::from_shape_fn((n, 16), |(i, j)| {
            let on = if classes[i] == 0 {
                j % 4 < 2
            } else {
                j / 4 < 2
            };
            (if on { 0.6 } else { -0.6 } + r.random_range(-0.2..0.2f64)).clamp(-1.0, 1.0)
        });
        ImageDataset::new(images, Shape::image(1, 4, 4), classes, None, "stripes").unwrap()
    }

    fn small_spec(seed: u64) -> UtilityClassifierSpec {
        UtilityClassifierSpec {
            layers: vec![
                LayerSpec::conv(4, 3, 2, 1),
                LayerSpec::act(Activation::Relu),
                LayerSpec::dense(8),
                LayerSpec::act(Activation::Relu),
            ],
            epochs: 20,
            batch_size: 16,
            step_size: 1e-2,
            seed,
        }
    }

    #[test]
    fn separable_toy_is_learned_deterministically() {
        let train = stripes(64, 1);
        let a = train_utility_classifier(&train, &small_spec(3)).unwrap();
        assert_eq!(
            accuracy(&a.predict(train.images()).unwrap(), train.classes()),
            1.0
        );
        let b = train_utility_classifier(&train, &small_spec(3)).unwrap();
        let test = stripes(40, 2);
        assert_eq!(
            a.probabilities(test.images()).unwrap(),
            b.probabilities(test.images()).unwrap()
        );
        let single = train.subset(&train.indices_of(0, None));
        assert!(matches!(
            train_utility_classifier(&single, &small_spec(3)),
            Err(EvalError::SingleClassTraining)
        ));
    }

    #[test]
    fn per_class_generation_counts() {
        use crate::gan::GeneratorSpec;
        let spec = GeneratorSpec::mlp(
            LatentPrior {
                dimension: 2,
                ..Default::default()
            },
            &[4],
            Shape::flat(3),
            Some(2),
        );
        let mk = |epoch, seed| GeneratorCheckpoint {
            epoch,
            network: Network::new(spec.architecture(), &mut rng::stream(seed, "g", 0)).unwrap(),
        };
        let one = GeneratorSet::Conditional(vec![mk(50, 1)]);
        let s =
            generate_per_class(&one, &spec.latent, spec.output, 2, 200, 0, 0, &[1.0, 0.0]).unwrap();
        assert_eq!(s.data.len(), 400);
        let empty = generate_per_class(&one, &spec.latent, spec.output, 2, 0, 0, 0, &[]).unwrap();
        assert!(empty.data.is_empty());
        let five = GeneratorSet::Conditional((1..=5).map(|e| mk(e * 50, e)).collect());
        let s = generate_per_class(&five, &spec.latent, spec.output, 2, 200, 0, 0, &[]).unwrap();
        assert_eq!(s.data.indices_of(1, None).len(), 200);
        assert_eq!(s.provenance.epochs, vec![50, 100, 150, 200, 250]);
        // Remainder goes to the earliest checkpoint.
        assert_eq!(shares(7, 3), vec![3, 2, 2]);
        assert!(matches!(
            generate_per_class(&one, &spec.latent, spec.output, 3, 5, 0, 0, &[]),
            Err(EvalError::MissingClass(2))
        ));
        let uncond = GeneratorSpec::mlp(
            LatentPrior {
                dimension: 2,
                ..Default::default()
            },
            &[4],
            Shape::flat(3),
            None,
        );
        let u = |seed| GeneratorCheckpoint {
            epoch: 10,
            network: Network::new(uncond.architecture(), &mut rng::stream(seed, "u", 0)).unwrap(),
        };
        let per = GeneratorSet::PerClass(vec![vec![u(1)], vec![u(2)]]);
        let s = generate_per_class(&per, &uncond.latent, uncond.output, 2, 6, 0, 0, &[]).unwrap();
        assert_eq!(s.data.classes(), &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    }
}
