#![no_main]

use std::collections::BTreeSet;
use std::io::Cursor;

use classext::tracker::{best_crop_per_track, tracked_detections_from_reader};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(detections) = tracked_detections_from_reader(Cursor::new(data)) else {
        return;
    };

    let mut seen = BTreeSet::new();
    for det in &detections {
        assert!(
            seen.insert((det.track_id, det.frame_index)),
            "duplicate (track, frame) accepted"
        );
        assert!((0.0..=1.0).contains(&det.confidence));
        assert!(det.bbox.is_well_formed());
        assert!(!det.class_label.is_empty());
    }

    // best-crop selection must accept anything the loader accepted and
    // cover exactly the distinct track ids
    let best = best_crop_per_track(&detections).expect("loader output is consistent");
    let tracks: BTreeSet<u64> = detections.iter().map(|d| d.track_id).collect();
    assert_eq!(best.len(), tracks.len());
    for (track, (frame, _)) in &best {
        assert!(detections
            .iter()
            .any(|d| d.track_id == *track && d.frame_index == *frame));
    }
});
