//! Detector/corrector inference over a frame stream.
//!
//! The corrector re-classifies every detection whose label is a
//! compatible base class and overwrites its label and confidence with the
//! classifier's answer. Two drivers are provided:
//!
//! * [`run_sequential`] detects and corrects frame by frame on one
//!   thread. It is the reference: the parallel driver must reproduce its
//!   output exactly.
//! * [`run_dual_parallel`] runs the detector one frame ahead of the
//!   corrector, handing (frame, prediction) pairs through a single
//!   mutually exclusive slot. Timing changes, results must not.

mod slot;

pub use slot::SlotAudit;

use std::fmt;
use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::similarity::CompatibilityMap;
use slot::{PipelineSlot, SlotPayload};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid bounding box: {reason}")]
    InvalidBox { reason: String },
    #[error("classifier label set is missing required labels: {missing:?}")]
    LabelSetMismatch { missing: Vec<String> },
    #[error("prediction belongs to frame {actual} but frame {expected} was supplied")]
    PredictionFrameMismatch { expected: usize, actual: usize },
    #[error("expected frame index {expected} next in the stream, got {actual}")]
    NonConsecutiveFrame { expected: usize, actual: usize },
    #[error("frame index {index} is outside the scenario ({frame_count} frames)")]
    FrameOutOfRange { index: usize, frame_count: usize },
    #[error("no scripted region overlaps the requested box on frame {frame_index}")]
    NoMatchingRegion { frame_index: usize },
    #[error("classifier returned confidence {value} outside [0, 1]")]
    InvalidConfidence { value: f64 },
    #[error("{0}")]
    Backend(String),
}

/// One frame of the input stream. The payload is opaque to the engine;
/// mock backends store a token in it, real adapters store pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub payload: Vec<u8>,
}

/// Axis-aligned box in pixel coordinates, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Finite coordinates with positive extent, anchored at or after the
    /// origin. Frame bounds are checked separately.
    pub fn is_well_formed(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    /// Validate `0 <= x1 < x2 <= width` and `0 <= y1 < y2 <= height`.
    pub fn validate_within(&self, width: u32, height: u32) -> Result<(), EngineError> {
        if !self.is_well_formed() {
            return Err(EngineError::InvalidBox {
                reason: format!("degenerate box {self:?}"),
            });
        }
        if self.x2 > f64::from(width) || self.y2 > f64::from(height) {
            return Err(EngineError::InvalidBox {
                reason: format!("box {self:?} exceeds frame {width}x{height}"),
            });
        }
        Ok(())
    }

    /// Intersection-over-union with another box; 0 when either is
    /// degenerate or they do not overlap.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One detected object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "label")]
    pub class_label: String,
    pub confidence: f64,
    /// True once the classifier has overwritten the label or confidence.
    pub corrected: bool,
}

/// Detector output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionObject {
    #[serde(rename = "frame")]
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

/// Object detection backend. Must be deterministic for a given frame
/// payload; it is only ever driven from a single worker at a time.
pub trait Detector {
    fn detect(&mut self, frame: &Frame) -> Result<PredictionObject, EngineError>;
}

/// Region classification backend. `classify` must return a label drawn
/// from `label_set` and be deterministic for a given (payload, box).
pub trait Classifier {
    fn classify(&mut self, frame: &Frame, region: &BoundingBox)
        -> Result<(String, f64), EngineError>;
    fn label_set(&self) -> &[String];
}

/// Pipeline stage names for failure reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Corrector,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Detector => f.write_str("detector"),
            Stage::Corrector => f.write_str("corrector"),
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed at frame {frame_index}: {source}")]
pub struct StageFailure {
    pub frame_index: usize,
    pub stage: Stage,
    #[source]
    pub source: EngineError,
}

/// A run that aborted mid-stream. In-flight work is drained first, so
/// `partial` holds every frame completed before the failure, in order.
#[derive(Debug)]
pub struct PipelineFailure {
    pub failure: StageFailure,
    pub partial: Vec<PredictionObject>,
    pub stats: PipelineStats,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} frames completed before the failure)",
            self.failure,
            self.partial.len()
        )
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.failure)
    }
}

/// Run counters and timings. Wall time and busy times are the only
/// fields that vary between runs on identical inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineStats {
    pub frames_processed: usize,
    /// Region-level classify calls.
    pub classifier_invocations: usize,
    pub detections_corrected: usize,
    pub wall_time: Duration,
    pub detector_busy: Duration,
    pub corrector_busy: Duration,
    pub slot_audit: SlotAudit,
}

fn secs_ms(d: Duration) -> f64 {
    (d.as_secs_f64() * 1000.0).round() / 1000.0
}

impl Serialize for PipelineStats {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct BusyTimes {
            detector: f64,
            corrector: f64,
        }
        let mut s = serializer.serialize_struct("PipelineStats", 6)?;
        s.serialize_field("frames_processed", &self.frames_processed)?;
        s.serialize_field("classifier_invocations", &self.classifier_invocations)?;
        s.serialize_field("detections_corrected", &self.detections_corrected)?;
        s.serialize_field("wall_time", &secs_ms(self.wall_time))?;
        s.serialize_field(
            "per_stage_busy_time",
            &BusyTimes {
                detector: secs_ms(self.detector_busy),
                corrector: secs_ms(self.corrector_busy),
            },
        )?;
        s.serialize_field("slot_audit", &self.slot_audit)?;
        s.end()
    }
}

/// Check that a classifier can produce every label the compatibility map
/// requires (all selected base classes plus all extension classes).
pub fn verify_label_coverage(
    label_set: &[String],
    compat: &CompatibilityMap,
) -> Result<(), EngineError> {
    let missing: Vec<String> = compat
        .required_labels()
        .into_iter()
        .filter(|needed| !label_set.iter().any(|have| have == needed))
        .map(str::to_owned)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EngineError::LabelSetMismatch { missing })
    }
}

/// Expand a box by `pad_fraction` of its width/height on each side,
/// clamped to the frame bounds.
pub fn crop_box(
    frame: &Frame,
    bbox: &BoundingBox,
    pad_fraction: f64,
) -> Result<BoundingBox, EngineError> {
    if !(pad_fraction.is_finite() && pad_fraction >= 0.0) {
        return Err(EngineError::InvalidBox {
            reason: format!("pad fraction {pad_fraction} must be finite and non-negative"),
        });
    }
    bbox.validate_within(frame.width, frame.height)?;
    let dx = pad_fraction * bbox.width();
    let dy = pad_fraction * bbox.height();
    Ok(BoundingBox {
        x1: (bbox.x1 - dx).max(0.0),
        y1: (bbox.y1 - dy).max(0.0),
        x2: (bbox.x2 + dx).min(f64::from(frame.width)),
        y2: (bbox.y2 + dy).min(f64::from(frame.height)),
    })
}

/// Re-classify every detection whose label is a compatible base class.
///
/// The classifier's label and confidence replace the detector's even when
/// they agree, and `corrected` is set; the re-scoring is part of the
/// accuracy story, not just the relabeling. Boxes and detection order
/// never change.
pub fn correct_prediction<C>(
    frame: &Frame,
    prediction: PredictionObject,
    classifier: &mut C,
    compat: &CompatibilityMap,
    pad_fraction: f64,
) -> Result<PredictionObject, EngineError>
where
    C: Classifier + ?Sized,
{
    correct_prediction_counted(frame, prediction, classifier, compat, pad_fraction)
        .map(|(prediction, _)| prediction)
}

pub(crate) fn correct_prediction_counted<C>(
    frame: &Frame,
    mut prediction: PredictionObject,
    classifier: &mut C,
    compat: &CompatibilityMap,
    pad_fraction: f64,
) -> Result<(PredictionObject, usize), EngineError>
where
    C: Classifier + ?Sized,
{
    verify_label_coverage(classifier.label_set(), compat)?;
    if prediction.frame_index != frame.index {
        return Err(EngineError::PredictionFrameMismatch {
            expected: frame.index,
            actual: prediction.frame_index,
        });
    }
    let mut calls = 0usize;
    for detection in &mut prediction.detections {
        if !compat.is_compatible_base(&detection.class_label) {
            continue;
        }
        let region = crop_box(frame, &detection.bbox, pad_fraction)?;
        let (label, confidence) = classifier.classify(frame, &region)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(EngineError::InvalidConfidence { value: confidence });
        }
        calls += 1;
        detection.class_label = label;
        detection.confidence = confidence;
        detection.corrected = true;
    }
    Ok((prediction, calls))
}

/// Detect-then-correct, one frame at a time, on the calling thread.
///
/// This is the determinism oracle for [`run_dual_parallel`].
pub fn run_sequential<I, D, C>(
    frames: I,
    detector: &mut D,
    classifier: &mut C,
    compat: &CompatibilityMap,
    pad_fraction: f64,
) -> Result<(Vec<PredictionObject>, PipelineStats), Box<PipelineFailure>>
where
    I: IntoIterator<Item = Frame>,
    D: Detector + ?Sized,
    C: Classifier + ?Sized,
{
    let started = Instant::now();
    let mut outputs = Vec::new();
    let mut stats = PipelineStats::default();

    let fail = |stage, frame_index, source, outputs: Vec<PredictionObject>, mut stats: PipelineStats| {
        stats.frames_processed = outputs.len();
        stats.wall_time = started.elapsed();
        Box::new(PipelineFailure {
            failure: StageFailure {
                frame_index,
                stage,
                source,
            },
            partial: outputs,
            stats,
        })
    };

    for (expected, frame) in frames.into_iter().enumerate() {
        if frame.index != expected {
            let source = EngineError::NonConsecutiveFrame {
                expected,
                actual: frame.index,
            };
            return Err(fail(Stage::Detector, frame.index, source, outputs, stats));
        }
        let detect_started = Instant::now();
        let prediction = match detector.detect(&frame) {
            Ok(prediction) => prediction,
            Err(source) => return Err(fail(Stage::Detector, frame.index, source, outputs, stats)),
        };
        stats.detector_busy += detect_started.elapsed();
        let correct_started = Instant::now();
        match correct_prediction_counted(&frame, prediction, classifier, compat, pad_fraction) {
            Ok((prediction, calls)) => {
                stats.corrector_busy += correct_started.elapsed();
                stats.classifier_invocations += calls;
                stats.detections_corrected += calls;
                outputs.push(prediction);
            }
            Err(source) => {
                return Err(fail(Stage::Corrector, frame.index, source, outputs, stats))
            }
        }
    }
    stats.frames_processed = outputs.len();
    stats.wall_time = started.elapsed();
    Ok((outputs, stats))
}

/// Detector and corrector on two workers, one frame apart, exchanging
/// (frame, prediction) through a single locked slot.
///
/// Output is element-for-element identical to [`run_sequential`] on the
/// same inputs; only the timing differs. The detector blocks while the
/// slot holds an unconsumed frame, so nothing is dropped or reordered.
/// On a stage error the other stage drains and the frames completed so
/// far are returned inside the failure.
pub fn run_dual_parallel<I, D, C>(
    frames: I,
    detector: &mut D,
    classifier: &mut C,
    compat: &CompatibilityMap,
    pad_fraction: f64,
) -> Result<(Vec<PredictionObject>, PipelineStats), Box<PipelineFailure>>
where
    I: IntoIterator<Item = Frame>,
    I::IntoIter: Send,
    D: Detector + Send + ?Sized,
    C: Classifier + ?Sized,
{
    let started = Instant::now();
    let slot = PipelineSlot::new();
    let frames = frames.into_iter();

    let mut outputs: Vec<PredictionObject> = Vec::new();
    let mut failure: Option<StageFailure> = None;
    let mut classifier_invocations = 0usize;
    let mut detections_corrected = 0usize;
    let mut corrector_busy = Duration::ZERO;

    let detector_busy = thread::scope(|scope| {
        let producer = scope.spawn(|| detector_worker(frames, detector, &slot));

        // If correction panics, the producer must still be unblocked so
        // the scope can join it.
        let mut cancel_guard = CancelOnDrop {
            slot: &slot,
            armed: true,
        };
        loop {
            match slot.consume() {
                SlotPayload::Item { frame, prediction } => {
                    let correct_started = Instant::now();
                    match correct_prediction_counted(
                        &frame,
                        prediction,
                        classifier,
                        compat,
                        pad_fraction,
                    ) {
                        Ok((prediction, calls)) => {
                            corrector_busy += correct_started.elapsed();
                            classifier_invocations += calls;
                            detections_corrected += calls;
                            outputs.push(prediction);
                        }
                        Err(source) => {
                            failure = Some(StageFailure {
                                frame_index: frame.index,
                                stage: Stage::Corrector,
                                source,
                            });
                            slot.cancel();
                            break;
                        }
                    }
                }
                SlotPayload::End => break,
                SlotPayload::Failed { frame_index, error } => {
                    failure = Some(StageFailure {
                        frame_index,
                        stage: Stage::Detector,
                        source: error,
                    });
                    break;
                }
            }
        }
        cancel_guard.armed = false;

        match producer.join() {
            Ok(busy) => busy,
            Err(_) => {
                if failure.is_none() {
                    failure = Some(StageFailure {
                        frame_index: outputs.len(),
                        stage: Stage::Detector,
                        source: EngineError::Backend("detector worker panicked".to_owned()),
                    });
                }
                Duration::ZERO
            }
        }
    });

    let stats = PipelineStats {
        frames_processed: outputs.len(),
        classifier_invocations,
        detections_corrected,
        wall_time: started.elapsed(),
        detector_busy,
        corrector_busy,
        slot_audit: slot.audit(),
    };
    match failure {
        None => Ok((outputs, stats)),
        Some(failure) => Err(Box::new(PipelineFailure {
            failure,
            partial: outputs,
            stats,
        })),
    }
}

fn detector_worker<I, D>(frames: I, detector: &mut D, slot: &PipelineSlot) -> Duration
where
    I: Iterator<Item = Frame>,
    D: Detector + Send + ?Sized,
{
    // If detection panics, the consumer must still be woken so the run
    // can drain and report instead of deadlocking.
    let mut panic_guard = FailOnDrop {
        slot,
        armed: true,
        frame_index: 0,
    };
    let mut busy = Duration::ZERO;

    for (expected, frame) in frames.enumerate() {
        panic_guard.frame_index = frame.index;
        if frame.index != expected {
            let error = EngineError::NonConsecutiveFrame {
                expected,
                actual: frame.index,
            };
            let _ = slot.produce(SlotPayload::Failed {
                frame_index: frame.index,
                error,
            });
            panic_guard.armed = false;
            return busy;
        }

        let detect_started = Instant::now();
        match detector.detect(&frame) {
            Ok(prediction) => {
                busy += detect_started.elapsed();
                if prediction.frame_index != frame.index {
                    let error = EngineError::PredictionFrameMismatch {
                        expected: frame.index,
                        actual: prediction.frame_index,
                    };
                    let _ = slot.produce(SlotPayload::Failed {
                        frame_index: frame.index,
                        error,
                    });
                    panic_guard.armed = false;
                    return busy;
                }
                if slot
                    .produce(SlotPayload::Item { frame, prediction })
                    .is_err()
                {
                    // Consumer cancelled; stop detecting.
                    panic_guard.armed = false;
                    return busy;
                }
            }
            Err(error) => {
                let _ = slot.produce(SlotPayload::Failed {
                    frame_index: frame.index,
                    error,
                });
                panic_guard.armed = false;
                return busy;
            }
        }
    }
    let _ = slot.produce(SlotPayload::End);
    panic_guard.armed = false;
    busy
}

struct CancelOnDrop<'a> {
    slot: &'a PipelineSlot,
    armed: bool,
}

impl Drop for CancelOnDrop<'_> {
    fn drop(&mut self) {
        if self.armed {
            self.slot.cancel();
        }
    }
}

struct FailOnDrop<'a> {
    slot: &'a PipelineSlot,
    armed: bool,
    frame_index: usize,
}

impl Drop for FailOnDrop<'_> {
    fn drop(&mut self) {
        if self.armed {
            let _ = self.slot.produce(SlotPayload::Failed {
                frame_index: self.frame_index,
                error: EngineError::Backend("detector stage panicked".to_owned()),
            });
        }
    }
}

/// Read a directory of frame files in lexicographic name order.
///
/// Payloads are taken verbatim (no decoding happens here), so the caller
/// supplies the frame dimensions the boxes are expressed in.
pub fn frames_from_dir<P: AsRef<std::path::Path>>(
    dir: P,
    width: u32,
    height: u32,
) -> std::io::Result<Vec<Frame>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            entry.file_type().ok()?.is_file().then(|| entry.path())
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .enumerate()
        .map(|(index, path)| {
            Ok(Frame {
                index,
                width,
                height,
                payload: std::fs::read(path)?,
            })
        })
        .collect()
}

/// Serialize predictions as JSON lines, one frame per line.
pub fn write_predictions_jsonl<W: Write>(
    mut writer: W,
    predictions: &[PredictionObject],
) -> std::io::Result<()> {
    for prediction in predictions {
        serde_json::to_writer(&mut writer, prediction)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn predictions_to_jsonl(predictions: &[PredictionObject]) -> String {
    let mut buf = Vec::new();
    write_predictions_jsonl(&mut buf, predictions).expect("write to Vec cannot fail");
    String::from_utf8(buf).expect("JSONL output is UTF-8")
}
