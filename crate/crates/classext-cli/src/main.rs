//! `classext` — extend an object detector with new classes without
//! retraining it.
//!
//! Typical flow: `centroids` to inspect class spreads, `select` to pick
//! the base classes confusable with each extension class, then `run`
//! (live pipeline), `track-correct` (recorded, tracked data) or `bench`
//! to compare the execution strategies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use classext::engine::{
    run_dual_parallel, run_sequential, write_predictions_jsonl, PipelineFailure, PipelineStats,
    PredictionObject,
};
use classext::feature_store::{load_feature_store, validate_store};
use classext::mock::{load_scenario, mock_classifier, mock_detector, MockScenario};
use classext::similarity::{
    select_compatible, similarity_matrix, store_centroids, CompatibilityMap, DistanceMetric,
};
use classext::tracker::{
    correct_tracks, load_tracked_detections, write_tracked_detections, TrackCorrectionResult,
};

#[derive(Parser)]
#[command(
    name = "classext",
    version,
    about = "Select confusable base classes for new detector classes and correct detections at inference time"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    #[value(name = "dual_parallel")]
    DualParallel,
    #[value(name = "sequential")]
    Sequential,
    #[value(name = "tracked")]
    Tracked,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-class feature centroids and inertias
    Centroids {
        /// Feature file (JSON lines: {"class", "id", "vector"})
        #[arg(long)]
        features: PathBuf,
        /// Output JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the similarity matrix and select compatible base classes
    ///
    /// Exits 2 when some extension class has no compatible base class
    /// below the threshold (the patch precondition fails).
    Select {
        #[arg(long)]
        features: PathBuf,
        /// Base classes, comma separated
        #[arg(long, value_delimiter = ',')]
        base: Vec<String>,
        /// Extension classes, comma separated
        #[arg(long, value_delimiter = ',')]
        ext: Vec<String>,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, default_value = "cosine", value_parser = parse_metric)]
        metric: DistanceMetric,
        /// Compatibility map JSON path; the similarity matrix CSV lands
        /// next to it with extension `.matrix.csv`
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the correction pipeline over a mock scenario
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Compatibility map JSON produced by `select`
        #[arg(long)]
        compat: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::DualParallel)]
        mode: Mode,
        /// Tracked detections JSONL (required for --mode tracked)
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Crop padding as a fraction of box size
        #[arg(long, default_value_t = 0.0)]
        pad: f64,
        /// Override the scenario's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Predictions JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Stats JSON path (default: <out>.stats.json)
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Correct tracked detections, one classification per compatible track
    TrackCorrect {
        /// Tracked detections JSONL
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        compat: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        pad: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrected detections JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Correction report JSON path (default: <out>.report.json)
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Compare sequential, dual-parallel and tracked runs on one scenario
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        compat: PathBuf,
        /// Tracked detections JSONL for the tracked leg
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0.0)]
        pad: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Benchmark report JSON path
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_metric(s: &str) -> Result<DistanceMetric, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Centroids { features, out } => cmd_centroids(&features, &out),
        Command::Select {
            features,
            base,
            ext,
            threshold,
            metric,
            out,
        } => cmd_select(&features, &base, &ext, threshold, metric, &out),
        Command::Run {
            scenario,
            compat,
            mode,
            detections,
            pad,
            seed,
            out,
            stats_out,
        } => {
            let stats_out = stats_out.unwrap_or_else(|| out.with_extension("stats.json"));
            match mode {
                Mode::Tracked => {
                    let detections = detections
                        .context("--mode tracked requires --detections")?;
                    cmd_track_correct(&detections, &scenario, &compat, pad, seed, &out, &stats_out)
                }
                _ => cmd_run(&scenario, &compat, mode, pad, seed, &out, &stats_out),
            }
        }
        Command::TrackCorrect {
            detections,
            scenario,
            compat,
            pad,
            seed,
            out,
            stats_out,
        } => {
            let stats_out = stats_out.unwrap_or_else(|| out.with_extension("report.json"));
            cmd_track_correct(&detections, &scenario, &compat, pad, seed, &out, &stats_out)
        }
        Command::Bench {
            scenario,
            compat,
            detections,
            reps,
            pad,
            seed,
            out,
        } => cmd_bench(&scenario, &compat, &detections, reps, pad, seed, &out),
    }
}

fn cmd_centroids(features: &Path, out: &Path) -> Result<ExitCode> {
    let store = load_feature_store(features, None)?;
    let labels: Vec<String> = store.class_labels().map(str::to_owned).collect();
    let centroids = store_centroids(&store, &labels)?;
    write_file(out, &serde_json::to_string_pretty(&centroids)?)?;
    println!(
        "wrote {} centroids (dimension {}) to {}",
        centroids.len(),
        store.dimension(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(
    features: &Path,
    base: &[String],
    ext: &[String],
    threshold: f64,
    metric: DistanceMetric,
    out: &Path,
) -> Result<ExitCode> {
    if base.is_empty() || ext.is_empty() {
        bail!("--base and --ext must each name at least one class");
    }
    let store = load_feature_store(features, None)?;

    let mut required: Vec<String> = base.to_vec();
    required.extend(ext.iter().cloned());
    let report = validate_store(&store, &required);
    if !report.all_present() {
        bail!(
            "classes missing from feature store: {}",
            report.missing_classes.join(", ")
        );
    }

    // Matrix label order: base classes as given, then extension classes.
    let mut ordered: Vec<String> = Vec::new();
    for label in base.iter().chain(ext) {
        if !ordered.contains(label) {
            ordered.push(label.clone());
        }
    }
    let centroids = store_centroids(&store, &ordered)?;
    let matrix = similarity_matrix(&centroids, metric)?;
    let map = select_compatible(&matrix, base, ext, threshold)?;

    let matrix_path = out.with_extension("matrix.csv");
    write_file(&matrix_path, &matrix.to_csv_string())?;
    write_file(out, &map.to_json_string())?;
    println!("wrote matrix to {}", matrix_path.display());
    println!("wrote compatibility map to {}", out.display());

    let unmatched = map.unmatched_extensions();
    if unmatched.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "similarity precondition failed: no base class within {} of: {}",
            threshold,
            unmatched.join(", ")
        );
        Ok(ExitCode::from(2))
    }
}

fn load_inputs(
    scenario_path: &Path,
    compat_path: &Path,
    seed: Option<u64>,
) -> Result<(Arc<MockScenario>, CompatibilityMap, Vec<String>)> {
    let mut scenario = load_scenario(scenario_path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let compat_bytes = fs::read(compat_path)
        .with_context(|| format!("failed to read compatibility map {}", compat_path.display()))?;
    let compat = CompatibilityMap::from_slice(&compat_bytes)?;
    let labels: Vec<String> = compat
        .required_labels()
        .into_iter()
        .map(str::to_owned)
        .collect();
    Ok((Arc::new(scenario), compat, labels))
}

fn cmd_run(
    scenario_path: &Path,
    compat_path: &Path,
    mode: Mode,
    pad: f64,
    seed: Option<u64>,
    out: &Path,
    stats_out: &Path,
) -> Result<ExitCode> {
    let (scenario, compat, labels) = load_inputs(scenario_path, compat_path, seed)?;
    let mut detector = mock_detector(scenario.clone(), scenario.detector_latency);
    let mut classifier = mock_classifier(
        scenario.clone(),
        labels,
        scenario.classifier_accuracy,
        scenario.classifier_latency,
    )?;

    let outcome = match mode {
        Mode::DualParallel => run_dual_parallel(
            scenario.frames(),
            &mut detector,
            &mut classifier,
            &compat,
            pad,
        ),
        Mode::Sequential => run_sequential(
            scenario.frames(),
            &mut detector,
            &mut classifier,
            &compat,
            pad,
        ),
        Mode::Tracked => unreachable!("tracked mode handled by the caller"),
    };

    match outcome {
        Ok((predictions, stats)) => {
            write_predictions(out, &predictions, None)?;
            write_file(stats_out, &serde_json::to_string_pretty(&stats)?)?;
            println!(
                "processed {} frames, {} classifier invocations, wall time {:.3}s",
                stats.frames_processed,
                stats.classifier_invocations,
                stats.wall_time.as_secs_f64()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            // Flush what completed, mark the failure, and report it.
            write_predictions(out, &failure.partial, Some(&failure))?;
            write_file(stats_out, &serde_json::to_string_pretty(&failure.stats)?)?;
            eprintln!("error: {failure}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn write_predictions(
    out: &Path,
    predictions: &[PredictionObject],
    failure: Option<&PipelineFailure>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions_jsonl(&mut buf, predictions)?;
    if let Some(failure) = failure {
        let marker = serde_json::json!({
            "failure": {
                "frame": failure.failure.frame_index,
                "stage": failure.failure.stage,
                "message": failure.failure.source.to_string(),
            }
        });
        buf.extend_from_slice(marker.to_string().as_bytes());
        buf.push(b'\n');
    }
    fs::write(out, buf).with_context(|| format!("failed to write {}", out.display()))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_track_correct(
    detections_path: &Path,
    scenario_path: &Path,
    compat_path: &Path,
    pad: f64,
    seed: Option<u64>,
    out: &Path,
    stats_out: &Path,
) -> Result<ExitCode> {
    let (scenario, compat, labels) = load_inputs(scenario_path, compat_path, seed)?;
    let detections = load_tracked_detections(detections_path)?;
    let mut classifier = mock_classifier(
        scenario.clone(),
        labels,
        scenario.classifier_accuracy,
        scenario.classifier_latency,
    )?;
    let result = correct_tracks(&detections, scenario.as_ref(), &mut classifier, &compat, pad)?;

    let mut buf = Vec::new();
    write_tracked_detections(&mut buf, &result.corrected)?;
    fs::write(out, buf).with_context(|| format!("failed to write {}", out.display()))?;
    write_file(stats_out, &serde_json::to_string_pretty(&result)?)?;
    println!(
        "examined {} tracks, corrected {} with {} classifier invocations",
        result.tracks_examined,
        result.per_track_decision.len(),
        result.classifier_invocations
    );
    Ok(ExitCode::SUCCESS)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

fn cmd_bench(
    scenario_path: &Path,
    compat_path: &Path,
    detections_path: &Path,
    reps: usize,
    pad: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<ExitCode> {
    if reps < 1 {
        bail!("--reps must be at least 1");
    }
    let (scenario, compat, labels) = load_inputs(scenario_path, compat_path, seed)?;
    let detections = load_tracked_detections(detections_path)?;

    let fresh_classifier = || {
        mock_classifier(
            scenario.clone(),
            labels.clone(),
            scenario.classifier_accuracy,
            scenario.classifier_latency,
        )
    };

    let mut sequential_wall = Vec::with_capacity(reps);
    let mut dual_wall = Vec::with_capacity(reps);
    let mut tracked_wall = Vec::with_capacity(reps);
    let mut sequential_stats: Option<PipelineStats> = None;
    let mut dual_stats: Option<PipelineStats> = None;
    let mut tracked_result: Option<TrackCorrectionResult> = None;

    for _ in 0..reps {
        let mut detector = mock_detector(scenario.clone(), scenario.detector_latency);
        let mut classifier = fresh_classifier()?;
        let (seq_out, stats) = run_sequential(
            scenario.frames(),
            &mut detector,
            &mut classifier,
            &compat,
            pad,
        )
        .map_err(|failure| anyhow::Error::new(*failure))?;
        sequential_wall.push(stats.wall_time.as_secs_f64());
        sequential_stats = Some(stats);

        let mut detector = mock_detector(scenario.clone(), scenario.detector_latency);
        let mut classifier = fresh_classifier()?;
        let (dual_out, stats) = run_dual_parallel(
            scenario.frames(),
            &mut detector,
            &mut classifier,
            &compat,
            pad,
        )
        .map_err(|failure| anyhow::Error::new(*failure))?;
        if dual_out != seq_out {
            bail!("dual-parallel output diverged from sequential output");
        }
        dual_wall.push(stats.wall_time.as_secs_f64());
        dual_stats = Some(stats);

        let mut classifier = fresh_classifier()?;
        let started = Instant::now();
        let result = correct_tracks(&detections, scenario.as_ref(), &mut classifier, &compat, pad)?;
        tracked_wall.push(started.elapsed().as_secs_f64());
        tracked_result = Some(result);
    }

    let sequential_stats = sequential_stats.expect("reps >= 1");
    let dual_stats = dual_stats.expect("reps >= 1");
    let tracked_result = tracked_result.expect("reps >= 1");

    let seq_median = median(&mut sequential_wall);
    let dual_median = median(&mut dual_wall);
    let tracked_median = median(&mut tracked_wall);

    let report = serde_json::json!({
        "repetitions": reps,
        "frames": scenario.frame_count,
        "sequential": {
            "median_wall_time": seq_median,
            "classifier_invocations": sequential_stats.classifier_invocations,
        },
        "dual_parallel": {
            "median_wall_time": dual_median,
            "classifier_invocations": dual_stats.classifier_invocations,
        },
        "tracked": {
            "median_wall_time": tracked_median,
            "classifier_invocations": tracked_result.classifier_invocations,
            "tracks_examined": tracked_result.tracks_examined,
        },
        "speedup": {
            "dual_parallel_vs_sequential": seq_median / dual_median,
            "tracked_vs_sequential": seq_median / tracked_median,
        },
    });
    write_file(out, &serde_json::to_string_pretty(&report)?)?;
    println!(
        "medians over {} reps: sequential {:.3}s, dual_parallel {:.3}s, tracked {:.3}s",
        reps, seq_median, dual_median, tracked_median
    );
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut data = contents.to_owned();
    if !data.ends_with('\n') {
        data.push('\n');
    }
    fs::write(path, data).with_context(|| format!("failed to write {}", path.display()))?;
    Ok(())
}
