//! Non-IID site shards: cluster bias with a mixing percentage, subgroup bias
//! with a fraction, fixed-count tables, and class-balanced holdouts.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::write_atomic;
use crate::data::ImageDataset;
use crate::rng;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("need at least 2 images, got {0}")]
    TooFew(usize),
    #[error("images have zero variance")]
    ZeroVariance,
    #[error("{what}: need {needed}, only {available} available")]
    Insufficient {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("{0} outside its allowed range")]
    OutOfRange(String),
    #[error("unknown subgroup `{0}`")]
    UnknownSubgroup(String),
    #[error("partition artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error("invalid partition: {0}")]
    Invalid(String),
}

/// Mean and the two leading principal directions of a pixel matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Two unit-norm rows, by decreasing variance.
    pub components: [Vec<f64>; 2],
}

impl PcaBasis {
    pub fn fit(x: &Array2<f64>) -> Result<Self, PartitionError> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(PartitionError::TooFew(n));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        if eig.eigenvalues[order[0]] <= 1e-12 {
            return Err(PartitionError::ZeroVariance);
        }
        let component = |k: usize| {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            // Sign: the largest-magnitude entry is positive.
            let big = v
                .iter()
                .copied()
                .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        };
        let second = if d > 1 { component(1) } else { vec![0.0; d] };
        Ok(Self {
            mean: mean.to_vec(),
            components: [component(0), second],
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(n, 2)` coordinates in the principal plane.
    pub fn project(&self, x: &Array2<f64>) -> Result<Array2<f64>, PartitionError> {
        if x.ncols() != self.dim() {
            return Err(PartitionError::Invalid(format!(
                "{} features for a {}-dimensional basis",
                x.ncols(),
                self.dim()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        let centered = x - &mean;
        let mut out = Array2::zeros((x.nrows(), 2));
        for k in 0..2 {
            out.column_mut(k)
                .assign(&centered.dot(&Array1::from(self.components[k].clone())));
        }
        Ok(out)
    }
}

/// Two-cluster split of one class in its principal plane. Cluster 1 has
/// the centroid with the smaller first coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSplit {
    pub embedding: Vec<[f64; 2]>,
    /// 1 or 2 per image.
    pub assignments: Vec<u8>,
    pub centroids: [[f64; 2]; 2],
    pub basis: PcaBasis,
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Index (0 or 1) of the nearer centroid; ties go to the first.
pub fn nearest_centroid(p: [f64; 2], centroids: &[[f64; 2]; 2]) -> usize {
    usize::from(sq_dist(p, centroids[1]) < sq_dist(p, centroids[0]))
}

fn lexi_less(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] < b[0] || (a[0] == b[0] && a[1] < b[1])
}

fn centroid_of(points: &[[f64; 2]], members: impl Iterator<Item = usize>) -> Option<[f64; 2]> {
    let (mut s, mut n) = ([0.0, 0.0], 0usize);
    for i in members {
        s[0] += points[i][0];
        s[1] += points[i][1];
        n += 1;
    }
    (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64])
}

/// Lloyd iterations from the two extreme points of the first coordinate
/// (shift below 1e-6 or 300 iterations), then single-point moves until no
/// move lowers the within-cluster sum of squares.
fn two_means(points: &[[f64; 2]]) -> (Vec<usize>, [[f64; 2]; 2]) {
    let lo = (0..points.len()).fold(0, |b, i| {
        if lexi_less(points[i], points[b]) {
            i
        } else {
            b
        }
    });
    let hi = (0..points.len()).fold(0, |b, i| {
        if lexi_less(points[b], points[i]) {
            i
        } else {
            b
        }
    });
    let mut c = [points[lo], points[hi]];
    let mut assign = vec![0usize; points.len()];
    for _ in 0..300 {
        for (a, &p) in assign.iter_mut().zip(points) {
            *a = nearest_centroid(p, &c);
        }
        let mut next = c;
        for (k, slot) in next.iter_mut().enumerate() {
            if let Some(m) = centroid_of(points, (0..points.len()).filter(|&i| assign[i] == k)) {
                *slot = m;
            }
        }
        let shift = sq_dist(next[0], c[0]).max(sq_dist(next[1], c[1])).sqrt();
        c = next;
        if shift < 1e-6 {
            break;
        }
    }
    for (a, &p) in assign.iter_mut().zip(points) {
        *a = nearest_centroid(p, &c);
    }
    let mut sizes = [0usize; 2];
    assign.iter().for_each(|&a| sizes[a] += 1);
    loop {
        let mut moved = false;
        for i in 0..points.len() {
            let from = assign[i];
            let to = 1 - from;
            if sizes[from] < 2 {
                continue;
            }
            let (nf, nt) = (sizes[from] as f64, sizes[to] as f64);
            let gain = nf / (nf - 1.0) * sq_dist(points[i], c[from])
                - nt / (nt + 1.0) * sq_dist(points[i], c[to]);
            if gain > 1e-12 {
                let p = points[i];
                for j in 0..2 {
                    c[from][j] = (c[from][j] * nf - p[j]) / (nf - 1.0);
                    c[to][j] = (c[to][j] * nt + p[j]) / (nt + 1.0);
                }
                sizes[from] -= 1;
                sizes[to] += 1;
                assign[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    for k in 0..2 {
        if let Some(m) = centroid_of(points, (0..points.len()).filter(|&i| assign[i] == k)) {
            c[k] = m;
        }
    }
    (assign, c)
}

/// PCA to two components, then 2-means in that plane.
pub fn pca_kmeans_split(images: &Array2<f64>) -> Result<ClusterSplit, PartitionError> {
    let basis = PcaBasis::fit(images)?;
    let coords = basis.project(images)?;
    let embedding: Vec<[f64; 2]> = coords.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let (assign, c) = two_means(&embedding);
    let flip = lexi_less(c[1], c[0]);
    let centroids = if flip { [c[1], c[0]] } else { c };
    let assignments = assign
        .iter()
        .map(|&a| if (a == 1) != flip { 2 } else { 1 })
        .collect();
    Ok(ClusterSplit {
        embedding,
        assignments,
        centroids,
        basis,
    })
}

impl ClusterSplit {
    /// Indices assigned to cluster 1 or 2.
    pub fn members(&self, cluster: u8) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }

    /// Within-cluster sum of squared distances to the cluster means.
    pub fn within_ss(&self) -> f64 {
        within_ss(&self.embedding, &self.assignments)
    }
}

pub fn within_ss(points: &[[f64; 2]], assignments: &[u8]) -> f64 {
    [1u8, 2]
        .iter()
        .map(|&k| {
            let members: Vec<usize> = (0..points.len()).filter(|&i| assignments[i] == k).collect();
            match centroid_of(points, members.iter().copied()) {
                Some(m) => members.iter().map(|&i| sq_dist(points[i], m)).sum(),
                None => 0.0,
            }
        })
        .sum()
}

/// `(class, subgroup) -> count` row of a fixed-count table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountEntry {
    pub class: usize,
    pub subgroup: String,
    pub count: usize,
}

/// The default helpee table: 10 nevi + 290 keratosis (benign), 150 + 150
/// melanoma and basal cell carcinoma (cancerous).
pub fn default_lesion_table() -> Vec<CountEntry> {
    let e = |class, s: &str, count| CountEntry {
        class,
        subgroup: s.to_string(),
        count,
    };
    vec![
        e(0, "melanocytic_nevi", 10),
        e(0, "benign_keratosis", 290),
        e(1, "melanoma", 150),
        e(1, "basal_cell_carcinoma", 150),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BiasSpec {
    /// Subset 1 takes `alpha`% of its samples from cluster 1, subset 2 the
    /// mirrored share.
    AlphaMix {
        alpha: f64,
        n_per_subset: usize,
        seed: u64,
    },
    /// The helpee's biased class holds `round(beta · n)` samples of
    /// `subgroup` and the rest from `complement`.
    BetaSubgroup {
        beta: f64,
        n_per_class_per_site: usize,
        subgroup: String,
        complement: String,
        seed: u64,
    },
    /// Site 1 receives exactly the table; site 2 the remaining pool.
    FixedCounts {
        count_table: Vec<CountEntry>,
        seed: u64,
    },
}

impl BiasSpec {
    pub fn seed(&self) -> u64 {
        match self {
            BiasSpec::AlphaMix { seed, .. }
            | BiasSpec::BetaSubgroup { seed, .. }
            | BiasSpec::FixedCounts { seed, .. } => *seed,
        }
    }
}

/// Per-site sorted index sets into one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePartition {
    pub sites: Vec<Vec<usize>>,
    pub spec: BiasSpec,
    pub seed: u64,
}

impl SitePartition {
    fn new(mut sites: Vec<Vec<usize>>, spec: BiasSpec) -> Self {
        sites.iter_mut().for_each(|s| s.sort_unstable());
        let seed = spec.seed();
        Self { sites, spec, seed }
    }

    /// Pairwise disjointness and bounds against a dataset of size `n`.
    pub fn check(&self, n: usize) -> Result<(), PartitionError> {
        let mut seen = BTreeSet::new();
        for (s, idx) in self.sites.iter().enumerate() {
            for &i in idx {
                if i >= n {
                    return Err(PartitionError::Invalid(format!(
                        "site {s} index {i} out of range {n}"
                    )));
                }
                if !seen.insert(i) {
                    return Err(PartitionError::Invalid(format!("index {i} appears twice")));
                }
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), PartitionError> {
        let json = serde_json::to_vec_pretty(self).expect("partition serializes");
        write_atomic(path, &json).map_err(|e| PartitionError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn read_json(path: &Path) -> Result<Self, PartitionError> {
        let err = |reason: String| PartitionError::Artifact {
            path: path.display().to_string(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn shuffled(mut pool: Vec<usize>, rng: &mut rng::Rng) -> Vec<usize> {
    pool.shuffle(rng);
    pool
}

/// Takes `counts[k]` consecutive items per site from a shuffled pool.
fn deal(pool: &[usize], counts: &[usize], what: &str) -> Result<Vec<Vec<usize>>, PartitionError> {
    let needed: usize = counts.iter().sum();
    if needed > pool.len() {
        return Err(PartitionError::Insufficient {
            what: what.to_string(),
            needed,
            available: pool.len(),
        });
    }
    let mut start = 0;
    Ok(counts
        .iter()
        .map(|&k| {
            let part = pool[start..start + k].to_vec();
            start += k;
            part
        })
        .collect())
}

/// Subset 1: `round(α% · n)` from cluster 1, the rest from cluster 2.
/// Subset 2 mirrors it with `100 − α`.
pub fn alpha_mix(
    split: &ClusterSplit,
    alpha: f64,
    n_per_subset: usize,
    seed: u64,
) -> Result<SitePartition, PartitionError> {
    if !(0.0..=100.0).contains(&alpha) {
        return Err(PartitionError::OutOfRange(format!("alpha {alpha}")));
    }
    let c1_1 = round_half_up(alpha * n_per_subset as f64 / 100.0).min(n_per_subset);
    let c1_2 = round_half_up((100.0 - alpha) * n_per_subset as f64 / 100.0).min(n_per_subset);
    let mut r = rng::stream(seed, "alpha-mix", 0);
    let one = deal(
        &shuffled(split.members(1), &mut r),
        &[c1_1, c1_2],
        "cluster 1",
    )?;
    let two = deal(
        &shuffled(split.members(2), &mut r),
        &[n_per_subset - c1_1, n_per_subset - c1_2],
        "cluster 2",
    )?;
    let sites = one
        .into_iter()
        .zip(two)
        .map(|(a, b)| [a, b].concat())
        .collect();
    Ok(SitePartition::new(
        sites,
        BiasSpec::AlphaMix {
            alpha,
            n_per_subset,
            seed,
        },
    ))
}

/// `n` split as evenly as possible over `k` parts; earlier parts get the
/// remainder.
fn even_split(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn subgroups_of_class(ds: &ImageDataset, class: usize) -> Vec<usize> {
    let tags = ds.subgroups().unwrap_or(&[]);
    let set: BTreeSet<usize> = (0..ds.len())
        .filter(|&i| ds.classes()[i] == class)
        .map(|i| tags[i])
        .collect();
    set.into_iter().collect()
}

/// Helpee (site 0) and helper (site 1) of equal size. Classes other than
/// the one holding `subgroup` are balanced over their subgroups at both
/// sites; that class holds `round(β·n)` of `subgroup` and the rest of
/// `complement` at the helpee, and an even split at the helper.
pub fn beta_subgroup_split(
    ds: &ImageDataset,
    subgroup: &str,
    complement: &str,
    beta: f64,
    n_per_class_per_site: usize,
    seed: u64,
) -> Result<SitePartition, PartitionError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(PartitionError::OutOfRange(format!("beta {beta}")));
    }
    let focus = ds
        .subgroup_id(subgroup)
        .ok_or_else(|| PartitionError::UnknownSubgroup(subgroup.into()))?;
    let other = ds
        .subgroup_id(complement)
        .ok_or_else(|| PartitionError::UnknownSubgroup(complement.into()))?;
    let tags = ds.subgroups().expect("subgroup ids exist");
    let class_of = |t: usize| {
        (0..ds.len())
            .find(|&i| tags[i] == t)
            .map(|i| ds.classes()[i])
    };
    let biased = class_of(focus).ok_or_else(|| PartitionError::UnknownSubgroup(subgroup.into()))?;
    if class_of(other) != Some(biased) {
        return Err(PartitionError::Invalid(format!(
            "`{subgroup}` and `{complement}` must share a class"
        )));
    }
    let n = n_per_class_per_site;
    let mut r = rng::stream(seed, "beta-subgroup", 0);
    let mut sites = vec![Vec::new(), Vec::new()];
    for class in 0..ds.n_classes() {
        let (groups, helpee, helper): (Vec<usize>, Vec<usize>, Vec<usize>) = if class == biased {
            let k = round_half_up(beta * n as f64).min(n);
            let even = even_split(n, 2);
            (vec![focus, other], vec![k, n - k], even)
        } else {
            let groups = subgroups_of_class(ds, class);
            let even = even_split(n, groups.len().max(1));
            (groups, even.clone(), even)
        };
        for (j, &g) in groups.iter().enumerate() {
            let pool = shuffled(ds.indices_of(class, Some(g)), &mut r);
            let dealt = deal(&pool, &[helpee[j], helper[j]], &ds.subgroup_names()[g])?;
            sites[0].extend(&dealt[0]);
            sites[1].extend(&dealt[1]);
        }
    }
    let spec = BiasSpec::BetaSubgroup {
        beta,
        n_per_class_per_site: n,
        subgroup: subgroup.into(),
        complement: complement.into(),
        seed,
    };
    Ok(SitePartition::new(sites, spec))
}

/// Site 0 receives exactly the table counts drawn from `pool`; site 1
/// receives the rest of `pool`.
pub fn lesion_fixed_split(
    ds: &ImageDataset,
    pool: &[usize],
    table: &[CountEntry],
    seed: u64,
) -> Result<SitePartition, PartitionError> {
    let tags = ds.subgroups();
    let mut r = rng::stream(seed, "fixed-counts", 0);
    let mut taken = BTreeSet::new();
    for entry in table {
        if entry.count == 0 {
            continue;
        }
        let g = ds
            .subgroup_id(&entry.subgroup)
            .ok_or_else(|| PartitionError::UnknownSubgroup(entry.subgroup.clone()))?;
        let tags = tags.expect("subgroup ids exist");
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| ds.classes()[i] == entry.class && tags[i] == g)
            .collect();
        let dealt = deal(
            &shuffled(candidates, &mut r),
            &[entry.count],
            &entry.subgroup,
        )?;
        taken.extend(dealt.into_iter().flatten());
    }
    let rest = pool
        .iter()
        .copied()
        .filter(|i| !taken.contains(i))
        .collect();
    let spec = BiasSpec::FixedCounts {
        count_table: table.to_vec(),
        seed,
    };
    Ok(SitePartition::new(
        vec![taken.into_iter().collect(), rest],
        spec,
    ))
}

/// Class-balanced test and validation sets carved off a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
    pub remainder: Vec<usize>,
}

/// Removes `n_per_class` per class; each class's share goes
/// `round(n · ratio)` to test and the rest to validation.
pub fn carve_holdout(
    ds: &ImageDataset,
    n_per_class: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<Holdout, PartitionError> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(PartitionError::OutOfRange(format!(
            "split ratio {split_ratio}"
        )));
    }
    let n_test = round_half_up(n_per_class as f64 * split_ratio).min(n_per_class);
    let mut r = rng::stream(seed, "holdout", 0);
    let (mut test, mut validation) = (Vec::new(), Vec::new());
    for class in 0..ds.n_classes() {
        let pool = shuffled(ds.indices_of(class, None), &mut r);
        let dealt = deal(
            &pool,
            &[n_test, n_per_class - n_test],
            &format!("class {class}"),
        )?;
        test.extend(&dealt[0]);
        validation.extend(&dealt[1]);
    }
    test.sort_unstable();
    validation.sort_unstable();
    let carved: BTreeSet<usize> = test.iter().chain(&validation).copied().collect();
    let remainder = (0..ds.len()).filter(|i| !carved.contains(i)).collect();
    Ok(Holdout {
        test,
        validation,
        remainder,
    })
}

/// Class-balanced subsample of `idx` with `n_total` items (per-class counts
/// split evenly, earlier classes taking the remainder).
pub fn balanced_subsample(
    ds: &ImageDataset,
    idx: &[usize],
    n_total: usize,
    seed: u64,
) -> Result<Vec<usize>, PartitionError> {
    let k = ds.n_classes();
    let counts = even_split(n_total, k.max(1));
    let mut r = rng::stream(seed, "balanced-subsample", 0);
    let mut out = Vec::with_capacity(n_total);
    for class in 0..k {
        let pool = shuffled(
            idx.iter()
                .copied()
                .filter(|&i| ds.classes()[i] == class)
                .collect(),
            &mut r,
        );
        out.extend(deal(&pool, &[counts[class]], &format!("class {class}"))?.remove(0));
    }
    out.sort_unstable();
    Ok(out)
}
