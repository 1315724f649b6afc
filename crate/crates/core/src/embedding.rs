//! Core data types: per-layer embedding matrices, ground-truth labels, the
//! seen/unseen class split, and a labeled multi-layer run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::RunManifest;

/// Feature vectors produced by one layer, stored row-major as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    layer_index: u32,
    n_points: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(layer_index: u32, n_points: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_points == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "embedding must have at least one point and one dimension (got {n_points}x{dim})"
            )));
        }
        let expected = n_points
            .checked_mul(dim)
            .ok_or_else(|| Error::Shape(format!("{n_points}x{dim} overflows")))?;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "declared {n_points}x{dim} = {expected} values, found {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at point {}, feature {}",
                values[pos],
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            layer_index,
            n_points,
            dim,
            values,
        })
    }

    pub fn from_rows(layer_index: u32, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "row {bad} has {} features, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(layer_index, rows.len(), dim, rows.concat())
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn with_layer_index(mut self, layer_index: u32) -> Self {
        self.layer_index = layer_index;
        self
    }

    /// Copies the given rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_points {
                return Err(Error::Shape(format!(
                    "row {i} out of range for {} points",
                    self.n_points
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(self.layer_index, indices.len(), self.dim, values)
    }

    /// Applies `f` to every row, producing a matrix of the same layer.
    pub fn map_rows<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let rows: Vec<Vec<f64>> = self.rows().map(f).collect();
        Self::from_rows(self.layer_index, &rows)
    }
}

/// Ground-truth class ids, one per point, with optional display names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<u32>,
    class_names: Option<BTreeMap<u32, String>>,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>) -> Self {
        Self {
            labels,
            class_names: None,
        }
    }

    pub fn with_class_names(mut self, names: Option<BTreeMap<u32, String>>) -> Self {
        self.class_names = names;
        self
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_names(&self) -> Option<&BTreeMap<u32, String>> {
        self.class_names.as_ref()
    }

    /// Display name of a class; falls back to the numeric id.
    pub fn name_of(&self, class: u32) -> String {
        self.class_names
            .as_ref()
            .and_then(|m| m.get(&class).cloned())
            .unwrap_or_else(|| class.to_string())
    }

    /// Distinct class ids present, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.class_counts().into_keys().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Which side of the class partition a metric is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Seen, Split::Unseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected seen or unseen)"
            ))),
        }
    }
}

/// Partition of the class set into training-visible and withheld classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    seen: BTreeSet<u32>,
    unseen: BTreeSet<u32>,
}

impl SplitSpec {
    pub fn new(
        seen: impl IntoIterator<Item = u32>,
        unseen: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let seen: BTreeSet<u32> = seen.into_iter().collect();
        let unseen: BTreeSet<u32> = unseen.into_iter().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Config(format!(
                "class {c} is listed as both seen and unseen"
            )));
        }
        if unseen.len() < 2 {
            return Err(Error::Config(format!(
                "at least 2 unseen classes are required, got {}",
                unseen.len()
            )));
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen(&self) -> &BTreeSet<u32> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<u32> {
        &self.unseen
    }

    pub fn classes(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Seen => &self.seen,
            Split::Unseen => &self.unseen,
        }
    }

    pub fn contains(&self, class: u32) -> bool {
        self.seen.contains(&class) || self.unseen.contains(&class)
    }
}

/// One model × dataset × seed: aligned per-layer embeddings plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRun {
    manifest: RunManifest,
    layers: Vec<EmbeddingMatrix>,
    labels: LabelVector,
    split: SplitSpec,
}

impl LabeledRun {
    pub fn new(
        manifest: RunManifest,
        layers: Vec<EmbeddingMatrix>,
        labels: LabelVector,
        split: SplitSpec,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a run needs at least one layer".into()));
        }
        let n = labels.len();
        for layer in &layers {
            if layer.n_points() != n {
                return Err(Error::Shape(format!(
                    "layer {} has {} points but there are {n} labels",
                    layer.layer_index(),
                    layer.n_points()
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[1].layer_index() <= pair[0].layer_index() {
                return Err(Error::Shape(format!(
                    "layer indices must be strictly increasing ({} then {})",
                    pair[0].layer_index(),
                    pair[1].layer_index()
                )));
            }
        }
        if let Some(&bad) = labels.as_slice().iter().find(|&&l| !split.contains(l)) {
            return Err(Error::Data(format!(
                "label {bad} is in neither the seen nor the unseen class set"
            )));
        }
        Ok(Self {
            manifest,
            layers,
            labels,
            split,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn layers(&self) -> &[EmbeddingMatrix] {
        &self.layers
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    pub fn layer_indices(&self) -> Vec<u32> {
        self.layers.iter().map(EmbeddingMatrix::layer_index).collect()
    }

    pub fn layer(&self, layer_index: u32) -> Result<&EmbeddingMatrix> {
        self.layers
            .iter()
            .find(|l| l.layer_index() == layer_index)
            .ok_or_else(|| {
                Error::Config(format!(
                    "layer {layer_index} not in run (available: {:?})",
                    self.layer_indices()
                ))
            })
    }

    /// Keeps exactly the points whose label is in `classes`, preserving
    /// relative order, filtering every layer identically.
    pub fn subset_by_classes(&self, classes: &BTreeSet<u32>) -> Result<LabeledRun> {
        let keep: Vec<usize> = self
            .labels
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptySelection(format!(
                "no points with labels in {classes:?}"
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| l.select_rows(&keep))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledRun {
            manifest: self.manifest.clone(),
            layers,
            labels: self.labels.select(&keep),
            split: self.split.clone(),
        })
    }

    pub fn subset_split(&self, split: Split) -> Result<LabeledRun> {
        self.subset_by_classes(self.split.classes(split))
            .map_err(|e| e.context(format!("{split} split")))
    }
}
