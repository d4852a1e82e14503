//! Shared fixtures for the CLI and acceptance suites.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

/// Pairwise cosine distances the Bus/Car/Truck/Van fixture reproduces.
pub const VEHICLE_DISTANCES: [(&str, &str, f64); 6] = [
    ("Bus", "Car", 0.0977),
    ("Bus", "Truck", 0.0314),
    ("Bus", "Van", 0.0468),
    ("Car", "Truck", 0.0685),
    ("Car", "Van", 0.0378),
    ("Truck", "Van", 0.0292),
];

/// Unit vectors whose pairwise cosine distances equal `VEHICLE_DISTANCES`
/// (Cholesky factor of the similarity Gram matrix, rows in label order).
pub const CLASS_VECTORS: [(&str, [f64; 4]); 4] = [
    ("Bus", [1.0, 0.0, 0.0, 0.0]),
    ("Car", [0.9023, 0.43110869859004236, 0.0, 0.0]),
    (
        "Truck",
        [0.9686, 0.13345177257652507, 0.20977288765754132, 0.0],
    ),
    (
        "Van",
        [
            0.9532,
            0.23689533598837684,
            0.07587433092508811,
            0.17185297697050275,
        ],
    ),
];

/// Feature file whose class centroids sit exactly on `CLASS_VECTORS`:
/// every sample is a positive scalar multiple of its class vector, so
/// scaling leaves the centroid direction (and all cosine distances)
/// untouched while giving each class a non-trivial spread.
pub fn vehicle_features_jsonl() -> String {
    let scales: [&[f64]; 4] = [
        &[0.9, 1.0, 1.1],
        &[0.8, 0.95, 1.05, 1.2],
        &[0.7, 0.9, 1.0, 1.1, 1.3],
        &[0.9, 1.0, 1.1],
    ];
    let mut out = String::new();
    for ((label, vector), class_scales) in CLASS_VECTORS.iter().zip(scales) {
        for (i, scale) in class_scales.iter().enumerate() {
            let sample: Vec<f64> = vector.iter().map(|&x| x * scale).collect();
            let line = json!({
                "class": label,
                "id": format!("{}-{:02}", label.to_lowercase(), i),
                "vector": sample,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn write_vehicle_features(path: &Path) {
    std::fs::write(path, vehicle_features_jsonl()).expect("write feature fixture");
}

/// The compatibility map `select` produces on the fixture at 0.05.
pub fn compat_json() -> String {
    json!({
        "threshold": 0.05,
        "entries": {
            "Van": [
                {"base": "Truck", "distance": 0.0292},
                {"base": "Car", "distance": 0.0378},
                {"base": "Bus", "distance": 0.0468},
            ]
        }
    })
    .to_string()
}

/// Run the CLI with the given arguments.
pub fn classext(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_classext"))
        .args(args)
        .output()
        .expect("classext binary runs")
}

pub fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

pub fn stdout_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A tracked-correction fixture: a scenario plus aligned tracked
/// detections, `compatible` of the `tracks` carrying compatible labels.
pub struct TrackedFixture {
    pub scenario_json: String,
    pub detections_jsonl: String,
    /// Compatible detections per frame (= `compatible`).
    pub compatible_per_frame: usize,
}

pub fn tracked_fixture(tracks: usize, frames: usize, compatible: usize) -> TrackedFixture {
    assert!(compatible <= tracks);
    const COMPAT_LABELS: [&str; 3] = ["Truck", "Car", "Bus"];
    const OTHER_LABELS: [&str; 6] = ["Person", "Dog", "Cat", "Bird", "Horse", "Sheep"];

    let width = 64 * tracks as u64 + 8;
    let height = 200u64;
    let mut script = Vec::new();
    let mut detections = String::new();
    for frame in 0..frames {
        for track in 0..tracks {
            // one lane per track; the box size varies so "best crop" is
            // a real choice
            let x1 = 4.0 + 64.0 * track as f64;
            let w = 30.0 + ((7 * frame + 3 * track) % 20) as f64;
            let y1 = 20.0;
            let h = 40.0 + ((frame + track) % 30) as f64;
            let bbox = [x1, y1, x1 + w, y1 + h];
            let confidence = 0.5 + 0.04 * ((track + frame) % 10) as f64;

            let (emitted, true_label) = if track < compatible {
                let emitted = COMPAT_LABELS[track % COMPAT_LABELS.len()];
                // even compatible tracks hide a Van, odd ones really are
                // what the detector says
                let true_label = if track % 2 == 0 { "Van" } else { emitted };
                (emitted, true_label)
            } else {
                let label = OTHER_LABELS[track % OTHER_LABELS.len()];
                (label, label)
            };

            script.push(json!({
                "frame": frame,
                "box": bbox,
                "true": true_label,
                "emitted": emitted,
                "confidence": confidence,
            }));
            detections.push_str(
                &json!({
                    "frame": frame,
                    "track": track,
                    "box": bbox,
                    "label": emitted,
                    "confidence": confidence,
                })
                .to_string(),
            );
            detections.push('\n');
        }
    }
    let scenario = json!({
        "seed": 5,
        "frames": frames,
        "size": [width, height],
        "script": script,
    });
    TrackedFixture {
        scenario_json: scenario.to_string(),
        detections_jsonl: detections,
        compatible_per_frame: compatible,
    }
}
