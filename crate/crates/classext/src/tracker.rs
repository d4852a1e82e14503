//! Offline correction over tracked detections.
//!
//! With a tracker in front, an object keeps one ID across frames, so the
//! classifier only needs to run once per compatible track — on the
//! best-sized crop — instead of once per frame. The verdict is then
//! written back onto every detection of that track.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{crop_box, BoundingBox, Classifier, EngineError, Frame, verify_label_coverage};
use crate::similarity::CompatibilityMap;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("failed to read tracked detections {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed tracked detection at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("track {track_id} carries more than one detection on frame {frame_index}")]
    DuplicateFramePerTrack { track_id: u64, frame_index: usize },
    #[error("frame {frame_index} referenced by a track is not resolvable")]
    MissingFrame { frame_index: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One detection carrying a tracker-assigned ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackedDetection {
    #[serde(rename = "frame")]
    pub frame_index: usize,
    #[serde(rename = "track")]
    pub track_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "label")]
    pub class_label: String,
    pub confidence: f64,
    #[serde(default)]
    pub corrected: bool,
}

/// What the per-track classification decided.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackDecision {
    pub chosen_frame_index: usize,
    pub old_label: String,
    pub new_label: String,
    pub confidence: f64,
}

/// Corrected detections plus the counters behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackCorrectionResult {
    #[serde(skip)]
    pub corrected: Vec<TrackedDetection>,
    pub tracks_examined: usize,
    /// One classify call per compatible track, nothing more.
    pub classifier_invocations: usize,
    pub per_track_decision: BTreeMap<u64, TrackDecision>,
}

/// Resolves a frame index back to a frame so a crop can be classified.
pub trait FrameLookup {
    fn frame(&self, index: usize) -> Option<Frame>;
}

impl FrameLookup for [Frame] {
    fn frame(&self, index: usize) -> Option<Frame> {
        self.iter().find(|f| f.index == index).cloned()
    }
}

impl FrameLookup for Vec<Frame> {
    fn frame(&self, index: usize) -> Option<Frame> {
        self.as_slice().frame(index)
    }
}

/// Parse tracked detections from JSON lines. Enforces the one detection
/// per (track, frame) invariant and basic field sanity.
pub fn tracked_detections_from_reader<R: BufRead>(
    reader: R,
) -> Result<Vec<TrackedDetection>, TrackerError> {
    let mut detections: Vec<TrackedDetection> = Vec::new();
    let mut seen: BTreeMap<(u64, usize), ()> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|source| TrackerError::Io {
            path: "<reader>".to_owned(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let det: TrackedDetection =
            serde_json::from_str(&text).map_err(|e| TrackerError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if det.class_label.is_empty() {
            return Err(TrackerError::MalformedRecord {
                line: line_no,
                message: "empty class label".to_owned(),
            });
        }
        if !det.confidence.is_finite() || !(0.0..=1.0).contains(&det.confidence) {
            return Err(TrackerError::MalformedRecord {
                line: line_no,
                message: format!("confidence {} outside [0, 1]", det.confidence),
            });
        }
        if !det.bbox.is_well_formed() {
            return Err(TrackerError::MalformedRecord {
                line: line_no,
                message: format!("degenerate box {:?}", det.bbox),
            });
        }
        if seen.insert((det.track_id, det.frame_index), ()).is_some() {
            return Err(TrackerError::DuplicateFramePerTrack {
                track_id: det.track_id,
                frame_index: det.frame_index,
            });
        }
        detections.push(det);
    }
    Ok(detections)
}

pub fn load_tracked_detections<P: AsRef<Path>>(
    path: P,
) -> Result<Vec<TrackedDetection>, TrackerError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TrackerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    tracked_detections_from_reader(BufReader::new(file))
}

/// Write tracked detections as JSON lines in input order.
pub fn write_tracked_detections<W: Write>(
    mut writer: W,
    detections: &[TrackedDetection],
) -> std::io::Result<()> {
    for det in detections {
        serde_json::to_writer(&mut writer, det)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Pick, per track, the detection with the largest box area; ties go to
/// the smallest frame index.
pub fn best_crop_per_track(
    detections: &[TrackedDetection],
) -> Result<BTreeMap<u64, (usize, BoundingBox)>, TrackerError> {
    let mut seen: BTreeMap<(u64, usize), ()> = BTreeMap::new();
    let mut best: BTreeMap<u64, (usize, BoundingBox, f64)> = BTreeMap::new();
    for det in detections {
        if seen.insert((det.track_id, det.frame_index), ()).is_some() {
            return Err(TrackerError::DuplicateFramePerTrack {
                track_id: det.track_id,
                frame_index: det.frame_index,
            });
        }
        let area = det.bbox.area();
        match best.get(&det.track_id) {
            Some(&(frame, _, best_area))
                if area < best_area || (area == best_area && det.frame_index >= frame) => {}
            _ => {
                best.insert(det.track_id, (det.frame_index, det.bbox, area));
            }
        }
    }
    Ok(best
        .into_iter()
        .map(|(track, (frame, bbox, _))| (track, (frame, bbox)))
        .collect())
}

/// Majority label of a track; ties go to the label carried by the
/// highest-confidence detection among the tied labels.
fn majority_label(detections: &[&TrackedDetection]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for det in detections {
        *counts.entry(det.class_label.as_str()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let mut winner: Option<(&str, f64)> = None;
    for (&label, &count) in &counts {
        if count != top {
            continue;
        }
        let peak = detections
            .iter()
            .filter(|d| d.class_label == label)
            .map(|d| d.confidence)
            .fold(f64::NEG_INFINITY, f64::max);
        // BTreeMap order makes the lexicographically smaller label win
        // residual confidence ties.
        if winner.is_none_or(|(_, best)| peak > best) {
            winner = Some((label, peak));
        }
    }
    winner.map(|(label, _)| label.to_owned()).unwrap_or_default()
}

/// Classify each compatible track once on its best crop and write the
/// verdict onto every detection of the track.
///
/// A track is compatible when its majority label is a selected base
/// class. Non-compatible tracks pass through unchanged; already corrected
/// tracks stay corrected because extension labels are never base classes.
pub fn correct_tracks<L, C>(
    detections: &[TrackedDetection],
    frames: &L,
    classifier: &mut C,
    compat: &CompatibilityMap,
    pad_fraction: f64,
) -> Result<TrackCorrectionResult, TrackerError>
where
    L: FrameLookup + ?Sized,
    C: Classifier + ?Sized,
{
    verify_label_coverage(classifier.label_set(), compat)?;
    let best_crops = best_crop_per_track(detections)?;

    let mut by_track: BTreeMap<u64, Vec<&TrackedDetection>> = BTreeMap::new();
    for det in detections {
        by_track.entry(det.track_id).or_default().push(det);
    }

    let mut decisions: BTreeMap<u64, TrackDecision> = BTreeMap::new();
    for (&track_id, members) in &by_track {
        let label = majority_label(members);
        if !compat.is_compatible_base(&label) {
            continue;
        }
        let (frame_index, bbox) = best_crops[&track_id];
        let frame = frames
            .frame(frame_index)
            .ok_or(TrackerError::MissingFrame { frame_index })?;
        let region = crop_box(&frame, &bbox, pad_fraction)?;
        let (new_label, confidence) = classifier.classify(&frame, &region)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(EngineError::InvalidConfidence { value: confidence }.into());
        }
        decisions.insert(
            track_id,
            TrackDecision {
                chosen_frame_index: frame_index,
                old_label: label,
                new_label,
                confidence,
            },
        );
    }

    let corrected = detections
        .iter()
        .map(|det| {
            let mut det = det.clone();
            if let Some(decision) = decisions.get(&det.track_id) {
                det.class_label = decision.new_label.clone();
                det.confidence = decision.confidence;
                det.corrected = true;
            }
            det
        })
        .collect();

    Ok(TrackCorrectionResult {
        corrected,
        tracks_examined: by_track.len(),
        classifier_invocations: decisions.len(),
        per_track_decision: decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn tracked(
        frame_index: usize,
        track_id: u64,
        bbox: BoundingBox,
        label: &str,
        confidence: f64,
    ) -> TrackedDetection {
        TrackedDetection {
            frame_index,
            track_id,
            bbox,
            class_label: label.to_owned(),
            confidence,
            corrected: false,
        }
    }

    fn square(size: f64) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, size, size)
    }

    fn compat_van() -> CompatibilityMap {
        CompatibilityMap::from_slice(
            br#"{"threshold": 0.05, "entries": {"Van": [
                {"base": "Truck", "distance": 0.0292},
                {"base": "Car", "distance": 0.0378},
                {"base": "Bus", "distance": 0.0468}]}}"#,
        )
        .unwrap()
    }

    struct FixedFrames {
        count: usize,
    }

    impl FrameLookup for FixedFrames {
        fn frame(&self, index: usize) -> Option<Frame> {
            (index < self.count).then(|| Frame {
                index,
                width: 64,
                height: 64,
                payload: Vec::new(),
            })
        }
    }

    struct EchoVan {
        labels: Vec<String>,
        calls: usize,
    }

    impl EchoVan {
        fn new() -> Self {
            Self {
                labels: ["Bus", "Car", "Truck", "Van"]
                    .iter()
                    .map(|&l| l.to_owned())
                    .collect(),
                calls: 0,
            }
        }
    }

    impl Classifier for EchoVan {
        fn classify(
            &mut self,
            _frame: &Frame,
            _region: &BoundingBox,
        ) -> Result<(String, f64), EngineError> {
            self.calls += 1;
            Ok(("Van".to_owned(), 0.95))
        }

        fn label_set(&self) -> &[String] {
            &self.labels
        }
    }

    #[test]
    fn best_crop_picks_the_largest_area() {
        let detections = vec![
            tracked(0, 7, square(10.0), "Car", 0.5),
            tracked(1, 7, square(20.0), "Car", 0.5),
            tracked(2, 7, BoundingBox::new(0.0, 0.0, 20.0, 10.0), "Car", 0.5),
        ];
        let best = best_crop_per_track(&detections).unwrap();
        assert_eq!(best[&7].0, 1);
    }

    #[test]
    fn best_crop_tie_goes_to_the_earliest_frame() {
        let detections = vec![
            tracked(3, 1, square(10.0), "Car", 0.5),
            tracked(7, 1, square(10.0), "Car", 0.9),
        ];
        let best = best_crop_per_track(&detections).unwrap();
        assert_eq!(best[&1].0, 3);

        // order in the file must not matter
        let reversed: Vec<_> = detections.into_iter().rev().collect();
        let best = best_crop_per_track(&reversed).unwrap();
        assert_eq!(best[&1].0, 3);
    }

    #[test]
    fn best_crop_singleton() {
        let detections = vec![tracked(5, 2, square(4.0), "Bus", 0.5)];
        let best = best_crop_per_track(&detections).unwrap();
        assert_eq!(best[&2], (5, square(4.0)));
    }

    #[test]
    fn duplicate_frame_per_track_is_rejected() {
        let detections = vec![
            tracked(0, 1, square(4.0), "Car", 0.5),
            tracked(0, 1, square(8.0), "Car", 0.5),
        ];
        assert!(matches!(
            best_crop_per_track(&detections),
            Err(TrackerError::DuplicateFramePerTrack {
                track_id: 1,
                frame_index: 0
            })
        ));
    }

    #[test]
    fn whole_track_gets_the_single_verdict() {
        let detections: Vec<_> = (0..10)
            .map(|f| tracked(f, 4, square(8.0 + f as f64), "Bus", 0.6))
            .collect();
        let frames = FixedFrames { count: 10 };
        let mut classifier = EchoVan::new();
        let result =
            correct_tracks(&detections, &frames, &mut classifier, &compat_van(), 0.0).unwrap();
        assert_eq!(result.classifier_invocations, 1);
        assert_eq!(classifier.calls, 1);
        assert_eq!(result.tracks_examined, 1);
        assert!(result
            .corrected
            .iter()
            .all(|d| d.class_label == "Van" && d.confidence == 0.95 && d.corrected));
        let decision = &result.per_track_decision[&4];
        assert_eq!(decision.chosen_frame_index, 9);
        assert_eq!(decision.old_label, "Bus");
        assert_eq!(decision.new_label, "Van");
    }

    #[test]
    fn only_compatible_tracks_are_classified() {
        let mut detections = Vec::new();
        for (track, label) in [(0, "Truck"), (1, "Car"), (2, "Person"), (3, "Dog"), (4, "Cat")] {
            for f in 0..3 {
                detections.push(tracked(f, track, square(4.0), label, 0.7));
            }
        }
        let frames = FixedFrames { count: 3 };
        let mut classifier = EchoVan::new();
        let result =
            correct_tracks(&detections, &frames, &mut classifier, &compat_van(), 0.0).unwrap();
        assert_eq!(result.tracks_examined, 5);
        assert_eq!(result.classifier_invocations, 2);
        assert!(result
            .corrected
            .iter()
            .filter(|d| d.track_id >= 2)
            .all(|d| !d.corrected));
    }

    #[test]
    fn no_compatible_tracks_is_a_no_op() {
        let detections = vec![
            tracked(0, 0, square(4.0), "Person", 0.7),
            tracked(1, 0, square(4.0), "Person", 0.7),
        ];
        let frames = FixedFrames { count: 2 };
        let mut classifier = EchoVan::new();
        let result =
            correct_tracks(&detections, &frames, &mut classifier, &compat_van(), 0.0).unwrap();
        assert_eq!(result.classifier_invocations, 0);
        assert_eq!(result.corrected, detections);
    }

    #[test]
    fn correction_is_idempotent() {
        let detections: Vec<_> = (0..5)
            .map(|f| tracked(f, 9, square(6.0), "Truck", 0.5))
            .collect();
        let frames = FixedFrames { count: 5 };
        let mut classifier = EchoVan::new();
        let first =
            correct_tracks(&detections, &frames, &mut classifier, &compat_van(), 0.0).unwrap();
        let second =
            correct_tracks(&first.corrected, &frames, &mut classifier, &compat_van(), 0.0)
                .unwrap();
        assert_eq!(second.classifier_invocations, 0);
        assert_eq!(second.corrected, first.corrected);
    }

    #[test]
    fn majority_vote_with_confidence_tiebreak() {
        // Truck and Person tie 2-2; Person carries the top confidence.
        let detections = [
            tracked(0, 1, square(4.0), "Truck", 0.6),
            tracked(1, 1, square(4.0), "Truck", 0.7),
            tracked(2, 1, square(4.0), "Person", 0.9),
            tracked(3, 1, square(4.0), "Person", 0.2),
        ];
        let members: Vec<&TrackedDetection> = detections.iter().collect();
        assert_eq!(majority_label(&members), "Person");

        // Clear majority wins regardless of confidence.
        let detections = [
            tracked(0, 1, square(4.0), "Truck", 0.2),
            tracked(1, 1, square(4.0), "Truck", 0.3),
            tracked(2, 1, square(4.0), "Person", 0.99),
        ];
        let members: Vec<&TrackedDetection> = detections.iter().collect();
        assert_eq!(majority_label(&members), "Truck");
    }

    #[test]
    fn missing_frame_is_reported() {
        let detections = vec![tracked(12, 0, square(4.0), "Car", 0.7)];
        let frames = FixedFrames { count: 3 };
        let mut classifier = EchoVan::new();
        assert!(matches!(
            correct_tracks(&detections, &frames, &mut classifier, &compat_van(), 0.0),
            Err(TrackerError::MissingFrame { frame_index: 12 })
        ));
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let line = r#"{"frame":0,"track":3,"box":[1.0,2.0,5.0,6.0],"label":"Car","confidence":0.8}"#;
        let loaded = tracked_detections_from_reader(Cursor::new(line)).unwrap();
        assert_eq!(loaded[0].track_id, 3);
        assert!(!loaded[0].corrected);

        let mut buf = Vec::new();
        write_tracked_detections(&mut buf, &loaded).unwrap();
        let reloaded = tracked_detections_from_reader(Cursor::new(&buf)).unwrap();
        assert_eq!(loaded, reloaded);

        for bad in [
            r#"{"frame":0,"track":1,"box":[1.0,2.0,5.0,6.0],"label":"Car","confidence":1.5}"#,
            r#"{"frame":0,"track":1,"box":[5.0,2.0,1.0,6.0],"label":"Car","confidence":0.5}"#,
            r#"{"frame":0,"track":1,"box":[1.0,2.0,5.0,6.0],"label":"","confidence":0.5}"#,
            r#"{"frame":0,"track":1,"box":[1.0,2.0,5.0],"label":"Car","confidence":0.5}"#,
        ] {
            assert!(
                tracked_detections_from_reader(Cursor::new(bad)).is_err(),
                "accepted {bad}"
            );
        }
    }
}
