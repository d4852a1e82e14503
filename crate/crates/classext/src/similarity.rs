//! Per-class feature centroids, pairwise distance matrices, and
//! threshold-based compatible-class selection.
//!
//! An extension class is served by an existing detector when at least one
//! base class sits within the similarity threshold of it: the detector
//! will propose regions for the new class but label them as the nearby
//! base class, and a small classifier can fix the label afterwards. The
//! selection here decides which base classes that classifier must cover.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::FeatureStore;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("input vector list is empty")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cosine distance is undefined on the all-zeros vector")]
    ZeroVector,
    #[error("duplicate class label {label:?}")]
    DuplicateLabel { label: String },
    #[error("need at least two centroids, got {count}")]
    NotEnoughCentroids { count: usize },
    #[error("class {label:?} is not present in the matrix")]
    UnknownClass { label: String },
    #[error("class {label:?} appears in both the base and extension sets")]
    OverlappingSets { label: String },
    #[error("similarity threshold must be a positive finite number, got {threshold}")]
    NonPositiveThreshold { threshold: f64 },
    #[error("unknown distance metric {name:?} (expected cosine, l1, l2, or squared_l2)")]
    UnknownMetric { name: String },
    #[error("class {label:?} not found in feature store")]
    MissingClass { label: String },
    #[error("malformed compatibility map: {message}")]
    MalformedCompatibilityMap { message: String },
}

/// Mean feature vector of one class, with its spread.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCentroid {
    #[serde(rename = "class")]
    pub class_label: String,
    pub centroid: Vec<f64>,
    /// Sum of squared Euclidean distances of the class vectors to the
    /// centroid: the overall spread of the class.
    pub inertia: f64,
    #[serde(rename = "count")]
    pub sample_count: usize,
}

/// Compute the arithmetic-mean centroid and inertia of a class.
///
/// A one-cluster k-means run converges to exactly this mean, so the mean
/// is computed directly; inertia is still reported as the spread
/// diagnostic that clustering would have provided.
pub fn compute_centroid(
    label: impl Into<String>,
    vectors: &[&[f64]],
) -> Result<ClassCentroid, SimilarityError> {
    let first = *vectors.first().ok_or(SimilarityError::EmptyInput)?;
    let dim = first.len();
    if dim == 0 {
        return Err(SimilarityError::EmptyInput);
    }
    for v in vectors {
        if v.len() != dim {
            return Err(SimilarityError::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }

    // Identical inputs short-circuit so the mean is bit-exact and the
    // inertia is exactly zero, not a rounding residue.
    if vectors.iter().all(|v| *v == first) {
        return Ok(ClassCentroid {
            class_label: label.into(),
            centroid: first.to_vec(),
            inertia: 0.0,
            sample_count: vectors.len(),
        });
    }

    let n = vectors.len() as f64;
    let mut centroid = vec![0.0f64; dim];
    for v in vectors {
        for (acc, &x) in centroid.iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
    for acc in &mut centroid {
        *acc /= n;
    }
    let mut inertia = 0.0f64;
    for v in vectors {
        for (&c, &x) in centroid.iter().zip(v.iter()) {
            let d = x - c;
            inertia += d * d;
        }
    }
    Ok(ClassCentroid {
        class_label: label.into(),
        centroid,
        inertia,
        sample_count: vectors.len(),
    })
}

/// Centroids for the named classes of a feature store, in the given order.
pub fn store_centroids(
    store: &FeatureStore,
    labels: &[String],
) -> Result<Vec<ClassCentroid>, SimilarityError> {
    labels
        .iter()
        .map(|label| {
            let vectors = store
                .class_vectors(label)
                .ok_or_else(|| SimilarityError::MissingClass {
                    label: label.clone(),
                })?;
            compute_centroid(label.clone(), &vectors)
        })
        .collect()
}

/// Distance between feature vectors or centroids.
///
/// Cosine is the measure the selection procedure is built around; the
/// Minkowski variants are kept for side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Cosine,
    L1,
    L2,
    SquaredL2,
}

impl DistanceMetric {
    /// All supported metrics, in CLI listing order.
    pub const ALL: [DistanceMetric; 4] = [
        DistanceMetric::Cosine,
        DistanceMetric::L1,
        DistanceMetric::L2,
        DistanceMetric::SquaredL2,
    ];

    /// Distance between two equal-length vectors.
    ///
    /// Cosine distance is `1 - (a . b) / (|a| * |b|)`, clamped to its
    /// mathematical range [0, 2] to absorb last-ulp rounding. Accumulation
    /// is in component order, so results are reproducible bit-for-bit.
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
        if a.len() != b.len() {
            return Err(SimilarityError::DimensionMismatch {
                expected: a.len(),
                actual: b.len(),
            });
        }
        match self {
            DistanceMetric::Cosine => {
                let mut dot = 0.0f64;
                let mut na2 = 0.0f64;
                let mut nb2 = 0.0f64;
                for (&x, &y) in a.iter().zip(b.iter()) {
                    dot += x * y;
                    na2 += x * x;
                    nb2 += y * y;
                }
                if na2 == 0.0 || nb2 == 0.0 {
                    return Err(SimilarityError::ZeroVector);
                }
                // Equal vectors are exactly distance zero; the general
                // formula would leave an ulp of rounding on the diagonal.
                if a == b {
                    return Ok(0.0);
                }
                let similarity = dot / (na2.sqrt() * nb2.sqrt());
                Ok((1.0 - similarity).clamp(0.0, 2.0))
            }
            DistanceMetric::L1 => Ok(a
                .iter()
                .zip(b.iter())
                .fold(0.0, |acc, (&x, &y)| acc + (x - y).abs())),
            DistanceMetric::L2 => Ok(DistanceMetric::SquaredL2.distance(a, b)?.sqrt()),
            DistanceMetric::SquaredL2 => Ok(a.iter().zip(b.iter()).fold(0.0, |acc, (&x, &y)| {
                let d = x - y;
                acc + d * d
            })),
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
            DistanceMetric::SquaredL2 => "squared_l2",
        };
        f.write_str(name)
    }
}

impl FromStr for DistanceMetric {
    type Err = SimilarityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "l1" => Ok(DistanceMetric::L1),
            "l2" => Ok(DistanceMetric::L2),
            "squared_l2" => Ok(DistanceMetric::SquaredL2),
            other => Err(SimilarityError::UnknownMetric {
                name: other.to_owned(),
            }),
        }
    }
}

/// Symmetric pairwise class-distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    labels: Vec<String>,
    metric: DistanceMetric,
    distances: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.distances[i][j]
    }

    /// Distance between two classes by label; `None` if either is unknown.
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.distances[i][j])
    }

    /// CSV export: header `class,<label>,...`, one row per class,
    /// distances with six decimal places.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        write!(writer, "class")?;
        for label in &self.labels {
            write!(writer, ",{label}")?;
        }
        writeln!(writer)?;
        for (i, label) in self.labels.iter().enumerate() {
            write!(writer, "{label}")?;
            for j in 0..self.labels.len() {
                write!(writer, ",{:.6}", self.distances[i][j])?;
            }
            writeln!(writer)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Pairwise distances between class centroids.
///
/// Each unordered pair is evaluated once and mirrored, so symmetry and the
/// zero diagonal hold by construction.
pub fn similarity_matrix(
    centroids: &[ClassCentroid],
    metric: DistanceMetric,
) -> Result<SimilarityMatrix, SimilarityError> {
    if centroids.len() < 2 {
        return Err(SimilarityError::NotEnoughCentroids {
            count: centroids.len(),
        });
    }
    let dim = centroids[0].centroid.len();
    let mut seen = BTreeSet::new();
    for c in centroids {
        if !seen.insert(c.class_label.as_str()) {
            return Err(SimilarityError::DuplicateLabel {
                label: c.class_label.clone(),
            });
        }
        if c.centroid.len() != dim {
            return Err(SimilarityError::DimensionMismatch {
                expected: dim,
                actual: c.centroid.len(),
            });
        }
    }
    let n = centroids.len();
    let mut distances = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(&centroids[i].centroid, &centroids[j].centroid)?;
            distances[i][j] = d;
            distances[j][i] = d;
        }
    }
    Ok(SimilarityMatrix {
        labels: centroids.iter().map(|c| c.class_label.clone()).collect(),
        metric,
        distances,
    })
}

/// One selected base class and its distance to the extension class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibleClass {
    pub base: String,
    pub distance: f64,
}

/// Selection result: for each extension class, the base classes whose
/// centroid distance falls strictly below the threshold, closest first.
///
/// An extension class with an empty list fails the patch precondition
/// (the detector will never propose regions for it); see
/// [`CompatibilityMap::unmatched_extensions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibilityMap {
    threshold: f64,
    entries: BTreeMap<String, Vec<CompatibleClass>>,
}

impl CompatibilityMap {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<CompatibleClass>> {
        &self.entries
    }

    pub fn extensions(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Union of all selected base classes.
    pub fn compatible_bases(&self) -> BTreeSet<&str> {
        self.entries
            .values()
            .flatten()
            .map(|c| c.base.as_str())
            .collect()
    }

    /// True when a detection with this label must be re-classified.
    pub fn is_compatible_base(&self, label: &str) -> bool {
        self.entries
            .values()
            .flatten()
            .any(|c| c.base == label)
    }

    /// Labels the correction classifier must be able to produce: every
    /// selected base class plus every extension class.
    pub fn required_labels(&self) -> BTreeSet<&str> {
        let mut labels = self.compatible_bases();
        labels.extend(self.extensions());
        labels
    }

    /// Extension classes with no compatible base class: the patch
    /// precondition fails for these.
    pub fn unmatched_extensions(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn all_extensions_covered(&self) -> bool {
        self.entries.values().all(|v| !v.is_empty())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("compatibility map serializes")
    }

    /// Parse and validate a compatibility map from JSON bytes.
    pub fn from_slice(bytes: &[u8]) -> Result<Self, SimilarityError> {
        let map: CompatibilityMap = serde_json::from_slice(bytes).map_err(|e| {
            SimilarityError::MalformedCompatibilityMap {
                message: e.to_string(),
            }
        })?;
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<(), SimilarityError> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(SimilarityError::NonPositiveThreshold {
                threshold: self.threshold,
            });
        }
        let malformed = |message: String| SimilarityError::MalformedCompatibilityMap { message };
        for (ext, bases) in &self.entries {
            if ext.is_empty() {
                return Err(malformed("empty extension class label".to_owned()));
            }
            for c in bases {
                if c.base.is_empty() {
                    return Err(malformed(format!("empty base label under {ext:?}")));
                }
                if !c.distance.is_finite() || c.distance < 0.0 {
                    return Err(malformed(format!(
                        "distance {} for base {:?} under {:?} is not a finite non-negative number",
                        c.distance, c.base, ext
                    )));
                }
                if c.distance >= self.threshold {
                    return Err(malformed(format!(
                        "base {:?} under {:?} has distance {} >= threshold {}",
                        c.base, ext, c.distance, self.threshold
                    )));
                }
                if self.entries.contains_key(&c.base) {
                    return Err(SimilarityError::OverlappingSets {
                        label: c.base.clone(),
                    });
                }
            }
            for pair in bases.windows(2) {
                let sorted = pair[0].distance < pair[1].distance
                    || (pair[0].distance == pair[1].distance && pair[0].base < pair[1].base);
                if !sorted {
                    return Err(malformed(format!(
                        "entry {ext:?} is not sorted ascending by (distance, base)"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Select, for each extension class, the base classes lying strictly
/// below the threshold, sorted ascending by distance with lexicographic
/// tie-breaking.
pub fn select_compatible(
    matrix: &SimilarityMatrix,
    base_classes: &[String],
    extension_classes: &[String],
    threshold: f64,
) -> Result<CompatibilityMap, SimilarityError> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(SimilarityError::NonPositiveThreshold { threshold });
    }
    let base_set: BTreeSet<&str> = base_classes.iter().map(String::as_str).collect();
    for ext in extension_classes {
        if base_set.contains(ext.as_str()) {
            return Err(SimilarityError::OverlappingSets { label: ext.clone() });
        }
    }
    for label in base_classes.iter().chain(extension_classes) {
        if !matrix.labels().iter().any(|l| l == label) {
            return Err(SimilarityError::UnknownClass {
                label: label.clone(),
            });
        }
    }

    let mut entries = BTreeMap::new();
    for ext in extension_classes {
        let mut selected: Vec<CompatibleClass> = base_set
            .iter()
            .filter_map(|base| {
                let d = matrix.get(ext, base).expect("labels checked above");
                (d < threshold).then(|| CompatibleClass {
                    base: (*base).to_owned(),
                    distance: d,
                })
            })
            .collect();
        selected.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("distances are finite")
                .then_with(|| a.base.cmp(&b.base))
        });
        entries.insert(ext.clone(), selected);
    }
    Ok(CompatibilityMap { threshold, entries })
}
