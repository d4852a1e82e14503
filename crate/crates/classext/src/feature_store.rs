//! Ingest, validate, and serve labeled feature vectors for base and
//! extension classes.
//!
//! The on-disk format is JSON lines, one record per line:
//!
//! ```text
//! {"class": "Car", "id": "car-0001", "vector": [0.12, -3.4, ...]}
//! ```
//!
//! Keys are exactly `class`, `id`, `vector`; unknown keys are rejected.
//! All vectors in a store share one dimension, no vector may contain
//! non-finite values, and the all-zeros vector is rejected because cosine
//! distance is undefined on it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default feature dimension when none is declared or inferred.
pub const DEFAULT_DIMENSION: usize = 2048;

#[derive(Debug, Error)]
pub enum FeatureStoreError {
    #[error("failed to read feature file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("dimension mismatch at line {line}: expected {expected}, got {actual}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        actual: usize,
    },
    #[error("zero vector for class {class:?} sample {sample_id:?} (line {line})")]
    ZeroVector {
        line: usize,
        class: String,
        sample_id: String,
    },
    #[error("duplicate sample id {sample_id:?} in class {class:?} (line {line})")]
    DuplicateSampleId {
        line: usize,
        class: String,
        sample_id: String,
    },
    #[error("feature store contains no records")]
    EmptyStore,
    #[error("store dimension must be positive")]
    InvalidDimension,
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "id")]
    pub sample_id: String,
    pub vector: Vec<f64>,
}

/// Immutable collection of feature records grouped by class.
///
/// Once constructed every record satisfies the store invariants, so the
/// store can be read from multiple threads without further checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dimension: usize,
    classes: BTreeMap<String, Vec<FeatureRecord>>,
}

impl FeatureStore {
    /// Build a store from records, validating every invariant.
    ///
    /// If `expected_dim` is `None` the first record fixes the dimension.
    /// Record ordinals (1-based) stand in for line numbers in errors.
    pub fn from_records<I>(
        records: I,
        expected_dim: Option<usize>,
    ) -> Result<Self, FeatureStoreError>
    where
        I: IntoIterator<Item = FeatureRecord>,
    {
        if expected_dim == Some(0) {
            return Err(FeatureStoreError::InvalidDimension);
        }
        let mut dimension = expected_dim;
        let mut classes: BTreeMap<String, Vec<FeatureRecord>> = BTreeMap::new();
        for (ordinal, record) in records.into_iter().enumerate() {
            let line = ordinal + 1;
            validate_record(&record, line, &mut dimension)?;
            let entries = classes.entry(record.class_label.clone()).or_default();
            if entries.iter().any(|r| r.sample_id == record.sample_id) {
                return Err(FeatureStoreError::DuplicateSampleId {
                    line,
                    class: record.class_label,
                    sample_id: record.sample_id,
                });
            }
            entries.push(record);
        }
        match dimension {
            Some(dimension) if !classes.is_empty() => Ok(Self { dimension, classes }),
            _ => Err(FeatureStoreError::EmptyStore),
        }
    }

    /// Parse JSON-lines records from a reader. Blank lines are skipped.
    pub fn from_reader<R: BufRead>(
        reader: R,
        expected_dim: Option<usize>,
    ) -> Result<Self, FeatureStoreError> {
        if expected_dim == Some(0) {
            return Err(FeatureStoreError::InvalidDimension);
        }
        let mut dimension = expected_dim;
        let mut classes: BTreeMap<String, Vec<FeatureRecord>> = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let text = line.map_err(|source| FeatureStoreError::Io {
                path: "<reader>".to_owned(),
                source,
            })?;
            if text.trim().is_empty() {
                continue;
            }
            let record: FeatureRecord = serde_json::from_str(&text).map_err(|e| {
                FeatureStoreError::MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                }
            })?;
            validate_record(&record, line_no, &mut dimension)?;
            let entries = classes.entry(record.class_label.clone()).or_default();
            if entries.iter().any(|r| r.sample_id == record.sample_id) {
                return Err(FeatureStoreError::DuplicateSampleId {
                    line: line_no,
                    class: record.class_label,
                    sample_id: record.sample_id,
                });
            }
            entries.push(record);
        }
        match dimension {
            Some(dimension) if !classes.is_empty() => Ok(Self { dimension, classes }),
            _ => Err(FeatureStoreError::EmptyStore),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Class labels in sorted order.
    pub fn class_labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_records(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Records of one class in load order.
    pub fn records(&self, class_label: &str) -> Option<&[FeatureRecord]> {
        self.classes.get(class_label).map(Vec::as_slice)
    }

    /// Borrowed vectors of one class in load order.
    pub fn class_vectors(&self, class_label: &str) -> Option<Vec<&[f64]>> {
        self.classes
            .get(class_label)
            .map(|records| records.iter().map(|r| r.vector.as_slice()).collect())
    }

    /// Write the store back out as JSON lines, classes in sorted order and
    /// records in load order. Reloading the output reproduces the store.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for records in self.classes.values() {
            for record in records {
                serde_json::to_writer(&mut writer, record)?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), FeatureStoreError> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|source| FeatureStoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_jsonl(&mut file)
            .map_err(|source| FeatureStoreError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

fn validate_record(
    record: &FeatureRecord,
    line: usize,
    dimension: &mut Option<usize>,
) -> Result<(), FeatureStoreError> {
    if record.class_label.is_empty() {
        return Err(FeatureStoreError::MalformedRecord {
            line,
            message: "empty class label".to_owned(),
        });
    }
    if record.sample_id.is_empty() {
        return Err(FeatureStoreError::MalformedRecord {
            line,
            message: "empty sample id".to_owned(),
        });
    }
    if record.vector.is_empty() {
        return Err(FeatureStoreError::MalformedRecord {
            line,
            message: "empty vector".to_owned(),
        });
    }
    match *dimension {
        Some(expected) if record.vector.len() != expected => {
            return Err(FeatureStoreError::DimensionMismatch {
                line,
                expected,
                actual: record.vector.len(),
            });
        }
        Some(_) => {}
        None => *dimension = Some(record.vector.len()),
    }
    if let Some(pos) = record.vector.iter().position(|v| !v.is_finite()) {
        return Err(FeatureStoreError::MalformedRecord {
            line,
            message: format!("non-finite value at component {pos}"),
        });
    }
    if record.vector.iter().all(|&v| v == 0.0) {
        return Err(FeatureStoreError::ZeroVector {
            line,
            class: record.class_label.clone(),
            sample_id: record.sample_id.clone(),
        });
    }
    Ok(())
}

/// Load a feature store from a JSON-lines file.
pub fn load_feature_store<P: AsRef<Path>>(
    path: P,
    expected_dim: Option<usize>,
) -> Result<FeatureStore, FeatureStoreError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| FeatureStoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FeatureStore::from_reader(BufReader::new(file), expected_dim)
}

/// Findings from [`validate_store`]: nothing here is fatal, callers decide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub dimension: usize,
    pub missing_classes: Vec<String>,
    pub class_counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn all_present(&self) -> bool {
        self.missing_classes.is_empty()
    }
}

/// Report which required classes are missing plus per-class sample counts.
pub fn validate_store(store: &FeatureStore, required_classes: &[String]) -> ValidationReport {
    let mut missing: Vec<String> = required_classes
        .iter()
        .filter(|c| store.records(c).is_none())
        .cloned()
        .collect();
    missing.sort();
    missing.dedup();
    let class_counts = store
        .classes
        .iter()
        .map(|(label, records)| (label.clone(), records.len()))
        .collect();
    ValidationReport {
        dimension: store.dimension,
        missing_classes: missing,
        class_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn record(class: &str, id: &str, vector: &[f64]) -> FeatureRecord {
        FeatureRecord {
            class_label: class.to_owned(),
            sample_id: id.to_owned(),
            vector: vector.to_vec(),
        }
    }

    #[test]
    fn loads_two_records_of_one_class() {
        let data = "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1,2,3,4]}\n\
                    {\"class\":\"Car\",\"id\":\"b\",\"vector\":[4,3,2,1]}\n";
        let store = FeatureStore::from_reader(Cursor::new(data), None).unwrap();
        assert_eq!(store.num_classes(), 1);
        assert_eq!(store.num_records(), 2);
        assert_eq!(store.dimension(), 4);
        assert_eq!(store.records("Car").unwrap()[1].sample_id, "b");
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let data = "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1,2,3,4]}\n\
                    {\"class\":\"Car\",\"id\":\"b\",\"vector\":[1,2,3,4]}\n\
                    {\"class\":\"Car\",\"id\":\"c\",\"vector\":[1,2,3,4,5]}\n";
        let err = FeatureStore::from_reader(Cursor::new(data), None).unwrap_err();
        match err {
            FeatureStoreError::DimensionMismatch {
                line,
                expected,
                actual,
            } => {
                assert_eq!(line, 3);
                assert_eq!(expected, 4);
                assert_eq!(actual, 5);
            }
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_vector_names_the_sample() {
        let data = "{\"class\":\"Bus\",\"id\":\"z\",\"vector\":[0.0,0.0]}\n";
        let err = FeatureStore::from_reader(Cursor::new(data), None).unwrap_err();
        match err {
            FeatureStoreError::ZeroVector {
                class, sample_id, ..
            } => {
                assert_eq!(class, "Bus");
                assert_eq!(sample_id, "z");
            }
            other => panic!("expected ZeroVector, got {other:?}"),
        }
    }

    #[test]
    fn expected_dim_overrides_first_record() {
        let data = "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1,2,3]}\n";
        let err = FeatureStore::from_reader(Cursor::new(data), Some(4)).unwrap_err();
        assert!(matches!(
            err,
            FeatureStoreError::DimensionMismatch {
                line: 1,
                expected: 4,
                actual: 3
            }
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_json() {
        for bad in [
            "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1],\"extra\":1}",
            "{\"class\":\"Car\",\"id\":\"a\"}",
            "not json",
        ] {
            let err = FeatureStore::from_reader(Cursor::new(bad), None).unwrap_err();
            assert!(
                matches!(err, FeatureStoreError::MalformedRecord { line: 1, .. }),
                "input {bad:?} gave {err:?}"
            );
        }
    }

    #[test]
    fn duplicate_sample_id_within_class_rejected() {
        let data = "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1,2]}\n\
                    {\"class\":\"Car\",\"id\":\"a\",\"vector\":[2,1]}\n";
        let err = FeatureStore::from_reader(Cursor::new(data), None).unwrap_err();
        assert!(matches!(
            err,
            FeatureStoreError::DuplicateSampleId { line: 2, .. }
        ));
    }

    #[test]
    fn same_sample_id_in_different_classes_is_fine() {
        let data = "{\"class\":\"Car\",\"id\":\"a\",\"vector\":[1,2]}\n\
                    {\"class\":\"Bus\",\"id\":\"a\",\"vector\":[2,1]}\n";
        let store = FeatureStore::from_reader(Cursor::new(data), None).unwrap();
        assert_eq!(store.num_classes(), 2);
    }

    #[test]
    fn empty_input_is_an_empty_store() {
        let err = FeatureStore::from_reader(Cursor::new(""), None).unwrap_err();
        assert!(matches!(err, FeatureStoreError::EmptyStore));
        let err = FeatureStore::from_reader(Cursor::new("\n\n"), Some(4)).unwrap_err();
        assert!(matches!(err, FeatureStoreError::EmptyStore));
    }

    #[test]
    fn validation_report_lists_missing_and_counts() {
        let store = FeatureStore::from_records(
            vec![
                record("Car", "a", &[1.0, 0.0]),
                record("Car", "b", &[0.0, 1.0]),
                record("Bus", "a", &[1.0, 1.0]),
            ],
            None,
        )
        .unwrap();
        let report = validate_store(&store, &["Car".to_owned(), "Van".to_owned()]);
        assert_eq!(report.missing_classes, vec!["Van".to_owned()]);
        assert_eq!(report.class_counts["Car"], 2);
        assert_eq!(report.class_counts["Bus"], 1);
        assert_eq!(report.dimension, 2);
        assert!(!report.all_present());

        let report = validate_store(&store, &[]);
        assert!(report.all_present());
    }

    #[test]
    fn write_then_reload_round_trips() {
        let store = FeatureStore::from_records(
            vec![
                record("Van", "v1", &[0.25, -1.5, 3.0]),
                record("Car", "c2", &[1e-9, 2.0, -0.125]),
                record("Car", "c1", &[7.0, 8.0, 9.0]),
            ],
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        store.write_jsonl(&mut buf).unwrap();
        let reloaded = FeatureStore::from_reader(Cursor::new(&buf), None).unwrap();
        assert_eq!(store, reloaded);
        // within-class order is preserved
        let ids: Vec<_> = reloaded
            .records("Car")
            .unwrap()
            .iter()
            .map(|r| r.sample_id.as_str())
            .collect();
        assert_eq!(ids, vec!["c2", "c1"]);
    }
}
