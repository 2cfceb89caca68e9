//! Labeled image collections and manifest-driven loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, ArrayView1};
use serde::Deserialize;
use thiserror::Error;

use crate::gan::{GanError, LabeledBatch};
use crate::nn::{gather_rows, Shape};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {path}: {source}")]
    Manifest { path: PathBuf, source: csv::Error },
    #[error("manifest row {row} ({file}): {reason}")]
    Row {
        row: usize,
        file: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Gan(#[from] GanError),
}

/// Images in `[-1, 1]`, one flattened channel-major image per row, with
/// class labels and optional subgroup tags that refine the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Array2<f64>,
    shape: Shape,
    classes: Vec<usize>,
    subgroups: Option<Vec<usize>>,
    subgroup_names: Vec<String>,
    source: String,
}

impl ImageDataset {
    pub fn new(
        images: Array2<f64>,
        shape: Shape,
        classes: Vec<usize>,
        subgroups: Option<(Vec<usize>, Vec<String>)>,
        source: impl Into<String>,
    ) -> Result<Self, DataError> {
        if images.ncols() != shape.len() {
            return Err(DataError::Invalid(format!(
                "rows hold {} values, shape needs {}",
                images.ncols(),
                shape.len()
            )));
        }
        if classes.len() != images.nrows() {
            return Err(DataError::Invalid(format!(
                "{} class labels for {} images",
                classes.len(),
                images.nrows()
            )));
        }
        if images.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::Invalid(
                "pixel values must lie in [-1, 1]".into(),
            ));
        }
        let (subgroups, subgroup_names) = match subgroups {
            None => (None, Vec::new()),
            Some((tags, names)) => {
                if tags.len() != images.nrows() {
                    return Err(DataError::Invalid(format!(
                        "{} subgroup tags for {} images",
                        tags.len(),
                        images.nrows()
                    )));
                }
                let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
                for (&t, &c) in tags.iter().zip(&classes) {
                    if t >= names.len() {
                        return Err(DataError::Invalid(format!("subgroup tag {t} has no name")));
                    }
                    if *owner.entry(t).or_insert(c) != c {
                        return Err(DataError::Invalid(format!(
                            "subgroup `{}` spans several classes",
                            names[t]
                        )));
                    }
                }
                (Some(tags), names)
            }
        };
        Ok(Self {
            images,
            shape,
            classes,
            subgroups,
            subgroup_names,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f64> {
        self.images.row(i)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subgroups(&self) -> Option<&[usize]> {
        self.subgroups.as_deref()
    }

    pub fn subgroup_names(&self) -> &[String] {
        &self.subgroup_names
    }

    pub fn subgroup_id(&self, name: &str) -> Option<usize> {
        self.subgroup_names.iter().position(|n| n == name)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Indices of `class`, restricted to `subgroup` when given.
    pub fn indices_of(&self, class: usize, subgroup: Option<usize>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.classes[i] == class)
            .filter(|&i| match (subgroup, &self.subgroups) {
                (None, _) => true,
                (Some(s), Some(tags)) => tags[i] == s,
                (Some(_), None) => false,
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: gather_rows(&self.images, idx),
            shape: self.shape,
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            subgroups: self
                .subgroups
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
            subgroup_names: self.subgroup_names.clone(),
            source: self.source.clone(),
        }
    }

    /// Training batch over `idx`, with class labels when `labeled`.
    pub fn batch(&self, idx: &[usize], labeled: bool) -> Result<LabeledBatch, DataError> {
        let labels = labeled.then(|| idx.iter().map(|&i| self.classes[i]).collect());
        Ok(LabeledBatch::new(
            gather_rows(&self.images, idx),
            self.shape,
            labels,
        )?)
    }

    /// Concatenates two datasets of one shape; subgroup tags are dropped
    /// unless both carry the same names.
    pub fn concat(&self, other: &Self) -> Result<Self, DataError> {
        if self.shape != other.shape {
            return Err(DataError::Invalid(
                "cannot concatenate datasets of different shapes".into(),
            ));
        }
        let images =
            ndarray::concatenate(ndarray::Axis(0), &[self.images.view(), other.images.view()])
                .expect("column counts agree");
        let classes = self.classes.iter().chain(&other.classes).copied().collect();
        let subgroups = match (&self.subgroups, &other.subgroups) {
            (Some(a), Some(b)) if self.subgroup_names == other.subgroup_names => Some((
                a.iter().chain(b).copied().collect(),
                self.subgroup_names.clone(),
            )),
            _ => None,
        };
        Self::new(
            images,
            self.shape,
            classes,
            subgroups,
            format!("{}+{}", self.source, other.source),
        )
    }
}

/// `p / 127.5 - 1`.
pub fn normalize_pixel(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounding and saturating.
pub fn denormalize_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    filename: String,
    class: usize,
    #[serde(default)]
    subgroup: String,
}

/// Decodes every manifest row from `dir`, resizes to `shape` (1 channel is
/// luma, 3 is RGB) and normalizes to `[-1, 1]`. Subgroup ids follow first
/// appearance; an all-empty subgroup column yields no tags.
pub fn load_image_folder(
    dir: &Path,
    manifest: &Path,
    shape: Shape,
) -> Result<ImageDataset, DataError> {
    if shape.channels != 1 && shape.channels != 3 {
        return Err(DataError::Invalid(format!(
            "unsupported channel count {}",
            shape.channels
        )));
    }
    let manifest_err = |source| DataError::Manifest {
        path: manifest.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(manifest).map_err(manifest_err)?;
    let (h, w) = (shape.height as u32, shape.width as u32);
    let mut pixels = Vec::new();
    let mut classes = Vec::new();
    let mut tags = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (row, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let rec = record.map_err(manifest_err)?;
        let path = dir.join(&rec.filename);
        let row_err = |reason: String| DataError::Row {
            row: row + 1,
            file: rec.filename.clone(),
            reason,
        };
        if !path.is_file() {
            return Err(row_err("file not found".into()));
        }
        let img = image::open(&path).map_err(|e| row_err(e.to_string()))?;
        let img = img.resize_exact(w, h, FilterType::Triangle);
        if shape.channels == 1 {
            pixels.extend(img.to_luma8().pixels().map(|p| normalize_pixel(p.0[0])));
        } else {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                pixels.extend(rgb.pixels().map(|p| normalize_pixel(p.0[c])));
            }
        }
        classes.push(rec.class);
        let tag = match names.iter().position(|n| *n == rec.subgroup) {
            Some(t) => t,
            None => {
                names.push(rec.subgroup.clone());
                names.len() - 1
            }
        };
        tags.push(tag);
    }
    let n = classes.len();
    let images = Array2::from_shape_vec((n, shape.len()), pixels).expect("one image per row");
    let subgroups = if names.iter().all(String::is_empty) {
        None
    } else {
        Some((tags, names))
    };
    ImageDataset::new(
        images,
        shape,
        classes,
        subgroups,
        manifest.display().to_string(),
    )
}
