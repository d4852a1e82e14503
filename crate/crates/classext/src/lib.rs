//! Extend an object detector with new classes without retraining it.
//!
//! The idea: when a new class is visually close to classes the detector
//! already knows, the detector will propose regions for the new objects
//! anyway — just under the wrong label. So instead of retraining the
//! detector, measure which base classes are confusable with each new
//! class (feature-centroid cosine distance under a threshold), train a
//! small classifier over that union, and patch detector outputs at
//! inference time.
//!
//! The crate provides the selection machinery and two correction drivers:
//!
//! * [`engine::run_dual_parallel`] — live streams; detector and corrector
//!   run concurrently, one frame apart, over a single locked slot.
//! * [`tracker::correct_tracks`] — recorded streams with tracker IDs; one
//!   classification per compatible track, applied to the whole track.
//!
//! Detectors and classifiers are pluggable through [`engine::Detector`]
//! and [`engine::Classifier`]; seeded mocks in [`mock`] stand in for real
//! models in tests and benchmarks.

pub mod engine;
pub mod feature_store;
pub mod mock;
pub mod similarity;
pub mod tracker;

pub use engine::{
    correct_prediction, crop_box, run_dual_parallel, run_sequential, BoundingBox, Classifier,
    Detection, Detector, EngineError, Frame, PipelineFailure, PipelineStats, PredictionObject,
    SlotAudit,
};
pub use feature_store::{load_feature_store, validate_store, FeatureRecord, FeatureStore};
pub use mock::{load_scenario, mock_classifier, mock_detector, LatencyModel, MockScenario};
pub use similarity::{
    compute_centroid, select_compatible, similarity_matrix, ClassCentroid, CompatibilityMap,
    DistanceMetric, SimilarityMatrix,
};
pub use tracker::{best_crop_per_track, correct_tracks, TrackCorrectionResult, TrackedDetection};
