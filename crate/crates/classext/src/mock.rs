//! Seeded detector and classifier doubles with scripted behavior and
//! simulated latency.
//!
//! A scenario scripts, per frame, where objects are and what the detector
//! says about them — including deliberate confusions where the emitted
//! label differs from the true one. The mock classifier looks the true
//! label up by region overlap, so with accuracy 1.0 it is an oracle and
//! every run is replayable bit-for-bit: latency jitter shows up in timing
//! only, never in outputs.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    BoundingBox, Classifier, Detection, Detector, EngineError, Frame, PredictionObject,
};
use crate::tracker::FrameLookup;

/// Score the mock classifier reports when it answers the true label.
pub const CORRECT_SCORE: f64 = 0.9;
/// Score the mock classifier reports when it answers a wrong label.
pub const WRONG_SCORE: f64 = 0.6;

/// Minimum overlap for a classify region to match a scripted object.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scenario: {message}")]
    MalformedScenario { message: String },
    #[error("invalid box on frame {frame_index}: {reason}")]
    InvalidBox { frame_index: usize, reason: String },
}

/// Uniform per-call delay in `[fixed, fixed + jitter]` milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub fixed_ms: f64,
    pub jitter_ms: f64,
}

impl LatencyModel {
    pub fn fixed(ms: f64) -> Self {
        Self {
            fixed_ms: ms,
            jitter_ms: 0.0,
        }
    }

    fn is_valid(&self) -> bool {
        self.fixed_ms.is_finite()
            && self.jitter_ms.is_finite()
            && self.fixed_ms >= 0.0
            && self.jitter_ms >= 0.0
    }

    /// Deterministic delay for one call, keyed by seed and call identity.
    fn delay(&self, key: u64) -> Duration {
        let ms = self.fixed_ms + self.jitter_ms * unit_f64(key);
        Duration::from_secs_f64(ms / 1000.0)
    }

    fn simulate(&self, key: u64) {
        let delay = self.delay(key);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
    }
}

/// One scripted object on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// What the object really is.
    #[serde(rename = "true")]
    pub true_label: String,
    /// What the mock detector reports; differs from `true_label` on
    /// scripted confusions.
    #[serde(rename = "emitted")]
    pub emitted_label: String,
    pub confidence: f64,
}

/// A full scripted run: frames, objects, and mock behavior knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScenario {
    pub seed: u64,
    #[serde(rename = "frames")]
    pub frame_count: usize,
    #[serde(rename = "size")]
    pub frame_size: (u32, u32),
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub detector_latency: LatencyModel,
    #[serde(default)]
    pub classifier_latency: LatencyModel,
    #[serde(default = "default_accuracy")]
    pub classifier_accuracy: f64,
}

fn default_accuracy() -> f64 {
    1.0
}

impl MockScenario {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, ScenarioError> {
        let scenario: MockScenario =
            serde_json::from_slice(bytes).map_err(|e| ScenarioError::MalformedScenario {
                message: e.to_string(),
            })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let malformed = |message: String| ScenarioError::MalformedScenario { message };
        let (width, height) = self.frame_size;
        if width == 0 || height == 0 {
            return Err(malformed(format!("frame size {width}x{height} is empty")));
        }
        if !(self.classifier_accuracy.is_finite()
            && (0.0..=1.0).contains(&self.classifier_accuracy))
        {
            return Err(malformed(format!(
                "classifier accuracy {} outside [0, 1]",
                self.classifier_accuracy
            )));
        }
        if !self.detector_latency.is_valid() || !self.classifier_latency.is_valid() {
            return Err(malformed("latency values must be finite and >= 0".to_owned()));
        }
        for entry in &self.script {
            if entry.frame >= self.frame_count {
                return Err(malformed(format!(
                    "script entry on frame {} but the scenario has {} frames",
                    entry.frame, self.frame_count
                )));
            }
            if entry.true_label.is_empty() || entry.emitted_label.is_empty() {
                return Err(malformed(format!("empty label on frame {}", entry.frame)));
            }
            if !entry.confidence.is_finite() || !(0.0..=1.0).contains(&entry.confidence) {
                return Err(malformed(format!(
                    "confidence {} outside [0, 1] on frame {}",
                    entry.confidence, entry.frame
                )));
            }
            entry
                .bbox
                .validate_within(width, height)
                .map_err(|e| ScenarioError::InvalidBox {
                    frame_index: entry.frame,
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Synthesize frame `index`; the payload is just the index token.
    pub fn frame(&self, index: usize) -> Option<Frame> {
        (index < self.frame_count).then(|| Frame {
            index,
            width: self.frame_size.0,
            height: self.frame_size.1,
            payload: index.to_le_bytes().to_vec(),
        })
    }

    /// The scenario's frame stream, in order.
    pub fn frames(&self) -> impl Iterator<Item = Frame> + Send + '_ {
        (0..self.frame_count).map(|k| self.frame(k).expect("index in range"))
    }

    fn entries_on(&self, frame_index: usize) -> impl Iterator<Item = &ScriptEntry> {
        self.script.iter().filter(move |e| e.frame == frame_index)
    }

    /// Labels the detector misreports somewhere in the script.
    pub fn confused_true_labels(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self
            .script
            .iter()
            .filter(|e| e.true_label != e.emitted_label)
            .map(|e| e.true_label.as_str())
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Fraction of scripted objects whose emitted label is already true.
    pub fn scripted_accuracy(&self) -> Option<f64> {
        if self.script.is_empty() {
            return None;
        }
        let correct = self
            .script
            .iter()
            .filter(|e| e.true_label == e.emitted_label)
            .count();
        Some(correct as f64 / self.script.len() as f64)
    }

    /// Fraction of scripted objects whose predicted label matches the true
    /// label, pairing the k-th detection of a frame with the k-th script
    /// entry (mock outputs keep script order and boxes). `None` when the
    /// script is empty or the predictions do not line up with it.
    pub fn label_accuracy(&self, predictions: &[PredictionObject]) -> Option<f64> {
        if self.script.is_empty() {
            return None;
        }
        let mut total = 0usize;
        let mut correct = 0usize;
        for frame_index in 0..self.frame_count {
            let entries: Vec<&ScriptEntry> = self.entries_on(frame_index).collect();
            if entries.is_empty() {
                continue;
            }
            let prediction = predictions.iter().find(|p| p.frame_index == frame_index)?;
            if prediction.detections.len() != entries.len() {
                return None;
            }
            for (entry, detection) in entries.iter().zip(&prediction.detections) {
                if detection.bbox.iou(&entry.bbox) < MATCH_IOU {
                    return None;
                }
                total += 1;
                if detection.class_label == entry.true_label {
                    correct += 1;
                }
            }
        }
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

impl FrameLookup for MockScenario {
    fn frame(&self, index: usize) -> Option<Frame> {
        MockScenario::frame(self, index)
    }
}

/// Load and validate a scenario file.
pub fn load_scenario<P: AsRef<Path>>(path: P) -> Result<MockScenario, ScenarioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    MockScenario::from_slice(&bytes)
}

/// Detector double: replays the script's emitted labels for each frame
/// after the scripted delay.
#[derive(Debug)]
pub struct MockDetector {
    scenario: Arc<MockScenario>,
    latency: LatencyModel,
}

/// Build a detector over a scenario.
pub fn mock_detector(scenario: Arc<MockScenario>, latency: LatencyModel) -> MockDetector {
    MockDetector { scenario, latency }
}

impl Detector for MockDetector {
    fn detect(&mut self, frame: &Frame) -> Result<PredictionObject, EngineError> {
        if frame.index >= self.scenario.frame_count {
            return Err(EngineError::FrameOutOfRange {
                index: frame.index,
                frame_count: self.scenario.frame_count,
            });
        }
        self.latency
            .simulate(mix(&[self.scenario.seed, 0xD37EC70A, frame.index as u64]));
        let detections = self
            .scenario
            .entries_on(frame.index)
            .map(|entry| Detection {
                bbox: entry.bbox,
                class_label: entry.emitted_label.clone(),
                confidence: entry.confidence,
                corrected: false,
            })
            .collect();
        Ok(PredictionObject {
            frame_index: frame.index,
            detections,
        })
    }
}

/// Classifier double: looks up the scripted object under the requested
/// region and answers its true label with the configured accuracy.
#[derive(Debug)]
pub struct MockClassifier {
    scenario: Arc<MockScenario>,
    labels: Vec<String>,
    accuracy: f64,
    latency: LatencyModel,
}

/// Build a classifier over a scenario.
///
/// Every scripted confusion's true label must be producible, otherwise
/// the classifier could never fix it.
pub fn mock_classifier(
    scenario: Arc<MockScenario>,
    label_set: Vec<String>,
    accuracy: f64,
    latency: LatencyModel,
) -> Result<MockClassifier, EngineError> {
    if !(accuracy.is_finite() && (0.0..=1.0).contains(&accuracy)) {
        return Err(EngineError::Backend(format!(
            "classifier accuracy {accuracy} outside [0, 1]"
        )));
    }
    let missing: Vec<String> = scenario
        .confused_true_labels()
        .into_iter()
        .filter(|needed| !label_set.iter().any(|have| have == needed))
        .map(str::to_owned)
        .collect();
    if !missing.is_empty() {
        return Err(EngineError::LabelSetMismatch { missing });
    }
    let mut labels = label_set;
    labels.sort_unstable();
    labels.dedup();
    Ok(MockClassifier {
        scenario,
        labels,
        accuracy,
        latency,
    })
}

impl Classifier for MockClassifier {
    fn classify(
        &mut self,
        frame: &Frame,
        region: &BoundingBox,
    ) -> Result<(String, f64), EngineError> {
        let mut best: Option<(&ScriptEntry, f64)> = None;
        for entry in self.scenario.entries_on(frame.index) {
            let overlap = region.iou(&entry.bbox);
            if overlap >= MATCH_IOU && best.is_none_or(|(_, previous)| overlap > previous) {
                best = Some((entry, overlap));
            }
        }
        let Some((entry, _)) = best else {
            return Err(EngineError::NoMatchingRegion {
                frame_index: frame.index,
            });
        };

        let key = mix(&[
            self.scenario.seed,
            0xC1A55_1F1E5,
            frame.index as u64,
            region.x1.to_bits(),
            region.y1.to_bits(),
            region.x2.to_bits(),
            region.y2.to_bits(),
        ]);
        self.latency.simulate(splitmix64(key ^ 0x7E9A));

        let is_correct = unit_f64(key) < self.accuracy;
        if is_correct {
            return Ok((entry.true_label.clone(), CORRECT_SCORE));
        }
        let wrong: Vec<&String> = self
            .labels
            .iter()
            .filter(|l| **l != entry.true_label)
            .collect();
        if wrong.is_empty() {
            // Single-label set: a wrong answer does not exist.
            return Ok((entry.true_label.clone(), CORRECT_SCORE));
        }
        let pick = (splitmix64(key ^ 0x3B) % wrong.len() as u64) as usize;
        Ok((wrong[pick].clone(), WRONG_SCORE))
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn mix(words: &[u64]) -> u64 {
    let mut h = 0x243F6A8885A308D3u64;
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// Map a hash to [0, 1).
fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario_json() -> &'static str {
        r#"{
            "seed": 42,
            "frames": 3,
            "size": [100, 100],
            "script": [
                {"frame": 0, "box": [10, 10, 30, 30], "true": "Van", "emitted": "Truck", "confidence": 0.8},
                {"frame": 2, "box": [40, 40, 60, 60], "true": "Car", "emitted": "Car", "confidence": 0.9}
            ]
        }"#
    }

    fn labels() -> Vec<String> {
        ["Bus", "Car", "Truck", "Van"]
            .iter()
            .map(|&l| l.to_owned())
            .collect()
    }

    #[test]
    fn minimal_scenario_loads() {
        let scenario =
            MockScenario::from_slice(br#"{"seed":1,"frames":1,"size":[8,8],"script":[]}"#)
                .unwrap();
        assert_eq!(scenario.frame_count, 1);
        assert_eq!(scenario.classifier_accuracy, 1.0);
        assert_eq!(scenario.detector_latency, LatencyModel::default());
        assert!(scenario.scripted_accuracy().is_none());
    }

    #[test]
    fn out_of_bounds_box_names_the_frame() {
        let bad = r#"{"seed":1,"frames":2,"size":[20,20],"script":[
            {"frame": 1, "box": [0, 0, 30, 10], "true": "A", "emitted": "A", "confidence": 0.5}
        ]}"#;
        match MockScenario::from_slice(bad.as_bytes()) {
            Err(ScenarioError::InvalidBox { frame_index, .. }) => assert_eq!(frame_index, 1),
            other => panic!("expected InvalidBox, got {other:?}"),
        }
    }

    #[test]
    fn reloading_the_same_bytes_gives_equal_scenarios() {
        let a = MockScenario::from_slice(scenario_json().as_bytes()).unwrap();
        let b = MockScenario::from_slice(scenario_json().as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detector_replays_the_script() {
        let scenario = Arc::new(MockScenario::from_slice(scenario_json().as_bytes()).unwrap());
        let mut detector = mock_detector(scenario.clone(), LatencyModel::default());

        let p0 = detector.detect(&scenario.frame(0).unwrap()).unwrap();
        assert_eq!(p0.detections.len(), 1);
        assert_eq!(p0.detections[0].class_label, "Truck");
        assert!(!p0.detections[0].corrected);

        let p1 = detector.detect(&scenario.frame(1).unwrap()).unwrap();
        assert!(p1.detections.is_empty());

        let again = detector.detect(&scenario.frame(0).unwrap()).unwrap();
        assert_eq!(p0, again);

        let far = Frame {
            index: 9,
            width: 100,
            height: 100,
            payload: Vec::new(),
        };
        assert!(matches!(
            detector.detect(&far),
            Err(EngineError::FrameOutOfRange {
                index: 9,
                frame_count: 3
            })
        ));
    }

    #[test]
    fn oracle_classifier_answers_the_true_label() {
        let scenario = Arc::new(MockScenario::from_slice(scenario_json().as_bytes()).unwrap());
        let mut classifier =
            mock_classifier(scenario.clone(), labels(), 1.0, LatencyModel::default()).unwrap();
        let frame = scenario.frame(0).unwrap();
        let region = BoundingBox::new(10.0, 10.0, 30.0, 30.0);
        let (label, score) = classifier.classify(&frame, &region).unwrap();
        assert_eq!(label, "Van");
        assert_eq!(score, CORRECT_SCORE);

        // padded region still overlaps enough to match
        let padded = BoundingBox::new(8.0, 8.0, 32.0, 32.0);
        let (label, _) = classifier.classify(&frame, &padded).unwrap();
        assert_eq!(label, "Van");
    }

    #[test]
    fn zero_accuracy_classifier_is_deterministically_wrong() {
        let scenario = Arc::new(MockScenario::from_slice(scenario_json().as_bytes()).unwrap());
        let mut classifier =
            mock_classifier(scenario.clone(), labels(), 0.0, LatencyModel::default()).unwrap();
        let frame = scenario.frame(0).unwrap();
        let region = BoundingBox::new(10.0, 10.0, 30.0, 30.0);
        let (first, score) = classifier.classify(&frame, &region).unwrap();
        assert_ne!(first, "Van");
        assert_eq!(score, WRONG_SCORE);
        let (second, _) = classifier.classify(&frame, &region).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn classify_off_script_has_no_matching_region() {
        let scenario = Arc::new(MockScenario::from_slice(scenario_json().as_bytes()).unwrap());
        let mut classifier =
            mock_classifier(scenario.clone(), labels(), 1.0, LatencyModel::default()).unwrap();
        let frame = scenario.frame(0).unwrap();
        let region = BoundingBox::new(60.0, 60.0, 90.0, 90.0);
        assert!(matches!(
            classifier.classify(&frame, &region),
            Err(EngineError::NoMatchingRegion { frame_index: 0 })
        ));
    }

    #[test]
    fn classifier_requires_confused_true_labels() {
        let scenario = Arc::new(MockScenario::from_slice(scenario_json().as_bytes()).unwrap());
        let err = mock_classifier(
            scenario,
            vec!["Truck".to_owned(), "Car".to_owned()],
            1.0,
            LatencyModel::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::LabelSetMismatch { missing } if missing == vec!["Van".to_owned()]));
    }

    #[test]
    fn accuracy_helpers_score_the_script() {
        let scenario = MockScenario::from_slice(scenario_json().as_bytes()).unwrap();
        assert_eq!(scenario.scripted_accuracy(), Some(0.5));
        assert_eq!(scenario.confused_true_labels(), vec!["Van"]);

        // predictions echoing the emitted labels score like the script
        let scenario = Arc::new(scenario);
        let mut detector = mock_detector(scenario.clone(), LatencyModel::default());
        let raw: Vec<PredictionObject> = scenario
            .frames()
            .map(|f| detector.detect(&f).unwrap())
            .collect();
        assert_eq!(scenario.label_accuracy(&raw), Some(0.5));
    }

    #[test]
    fn latency_jitter_is_deterministic_per_key() {
        let latency = LatencyModel {
            fixed_ms: 1.0,
            jitter_ms: 4.0,
        };
        let a = latency.delay(mix(&[7, 1]));
        let b = latency.delay(mix(&[7, 1]));
        let c = latency.delay(mix(&[7, 2]));
        assert_eq!(a, b);
        assert!(a >= Duration::from_millis(1));
        assert!(a <= Duration::from_micros(5_000));
        assert_ne!(a, c);
    }
}
