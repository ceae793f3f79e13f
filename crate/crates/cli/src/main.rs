//! `optin`: simulate, calibrate and replay opt-in recordings from the shell.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use optin_core::calibration::{calibrate_extrinsics, label_nlos, CalibrationDataset, CalibrationReport, CameraModel, DEFAULT_PAIRING_GAP};
use optin_core::matching::{build_cost_matrix, overlap_matrix, solve_assignment};
use optin_core::nlos::{train_detector, AlwaysLos, NlosClassifier, NlosDetectorModel, NlosError, SignalFeatures};
use optin_core::pipeline::config::parse_override;
use optin_core::pipeline::experiment::{calibrate_dataset, CalibrationSetup, SceneSetup};
use optin_core::pipeline::io::{load_truth, load_tracklets, load_uwb, read_records, save_records, save_tracklets, save_uwb};
use optin_core::pipeline::metrics::{with_latency, write_metrics_csv, write_sweep_csv, pr_auc, SweepPoint};
use optin_core::pipeline::replay::{decide, prepare_replay, track_tags, tracklets_from_detections};
use optin_core::pipeline::{compose_mask, evaluate_recall, FrameDecision, Image, MetricsRow, PipelineConfig, PipelineError, RunMetrics};
use optin_core::simulator::{derive_seed, generate_scene, simulate_detections, simulate_uwb, SceneConfig, TruthRecord};
use serde_json::json;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "optin", version, about = "Keep UWB tag carriers in frame and mask everyone else")]
struct Cli {
    /// Pipeline configuration JSON. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set noise.r_los.0=0.04`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    c_th: Option<f64>,
    #[arg(long, global = true)]
    u_th: Option<f64>,
    #[arg(long, global = true)]
    window_s: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write its UWB, tracklet and ground-truth streams.
    Simulate(SimulateArgs),
    /// Calibrate the installation from a one-person walk.
    Calibrate(CalibrateArgs),
    /// Train the NLoS detector on the outliers of a calibration walk.
    TrainNlos(TrainArgs),
    /// Filter every tag and write its trajectory.
    Track(TrackArgs),
    /// Assign tracklets to tags over the whole recording at once.
    Match(StreamArgs),
    /// Emit per-frame keep/mask decisions.
    Replay(ReplayArgs),
    /// Score saved decisions against ground truth.
    Evaluate(EvaluateArgs),
    /// Recall and misidentification rate over a range of cost thresholds.
    Sweep(SweepArgs),
    /// Compose a masked frame from a live frame, a background and a decision.
    Mask(MaskArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    people: usize,
    #[arg(long, default_value_t = 1)]
    tags: usize,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Simulate a calibration walk (one tagged demonstrator with scattered
    /// NLoS blockage) instead of a crowd.
    #[arg(long)]
    calibration_walk: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    uwb: PathBuf,
    /// Head boxes of the demonstrator only.
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Where to write the configuration with the calibrated values.
    #[arg(long)]
    config_out: Option<PathBuf>,
    /// Where to write the trained detector.
    #[arg(long)]
    detector_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    uwb: PathBuf,
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    uwb: PathBuf,
    #[arg(long)]
    tracklets: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    uwb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    streams: StreamArgs,
    /// Ground truth sidecar; enables scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    scene_id: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    scene_id: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    streams: StreamArgs,
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated cost thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5")]
    c_values: Vec<f64>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    decisions: PathBuf,
    /// Frame time; the decision closest to it is used.
    #[arg(long)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    let flags = [("c_th", cli.c_th), ("u_th", cli.u_th), ("window_s", cli.window_s)];
    for (key, value) in flags {
        if let Some(v) = value {
            overrides.push((key.to_string(), v.to_string()));
        }
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    PipelineConfig::load(cli.config.as_deref(), &overrides)
}

fn load_detector(cfg: &PipelineConfig) -> Result<Box<dyn NlosClassifier>> {
    Ok(match &cfg.detector {
        Some(path) => Box::new(NlosDetectorModel::load(path).with_context(|| format!("loading detector {}", path.display()))?),
        None => Box::new(AlwaysLos),
    })
}

fn simulate(cfg: &PipelineConfig, args: &SimulateArgs) -> Result<()> {
    let scene = if args.calibration_walk {
        SceneConfig::calibration_walk(args.duration, cfg.seed)
    } else {
        SceneConfig {
            n_people: args.people,
            n_tags: args.tags,
            duration: args.duration,
            seed: cfg.seed,
            ..SceneConfig::default()
        }
    };
    let mut setup = SceneSetup {
        scene,
        camera: cfg.camera,
        ..SceneSetup::default()
    };
    if args.calibration_walk {
        setup.uwb_noise = CalibrationSetup::default().uwb_noise;
    }
    let gt = generate_scene(&setup.scene)?;
    let uwb = simulate_uwb(&gt, &setup.anchor, &setup.uwb_noise, derive_seed(cfg.seed, 1));
    let det = simulate_detections(&gt, &setup.camera, &setup.camera_noise, derive_seed(cfg.seed, 2));
    std::fs::create_dir_all(&args.out_dir)?;
    save_uwb(args.out_dir.join("uwb.jsonl"), &uwb.samples)?;
    save_tracklets(args.out_dir.join("tracklets.jsonl"), &det.detections)?;
    save_records(args.out_dir.join("truth.jsonl"), &det.truth)?;
    std::fs::write(args.out_dir.join("scene.json"), serde_json::to_string_pretty(&setup)?)?;
    println!(
        "{} UWB samples, {} head boxes, {} NLoS",
        uwb.samples.len(),
        det.detections.len(),
        uwb.nlos.iter().filter(|n| **n).count()
    );
    Ok(())
}

fn calibration_data(uwb: &Path, tracklets: &Path) -> Result<CalibrationDataset> {
    let samples = load_uwb(uwb)?;
    let detections = load_tracklets(tracklets)?;
    Ok(CalibrationDataset::pair_streams(&samples, &detections, DEFAULT_PAIRING_GAP)?)
}

fn calibrate(cfg: &PipelineConfig, args: &CalibrateArgs) -> Result<()> {
    let data = calibration_data(&args.uwb, &args.tracklets)?;
    let setup = CalibrationSetup {
        seed: cfg.seed,
        ..CalibrationSetup::default()
    };
    let outcome = calibrate_dataset(&data, &cfg.camera, &setup, false)?;
    let report = CalibrationReport::new(&outcome.fit, &outcome.tuned, outcome.n_pairs);
    report.save(&args.report)?;
    let mut calibrated = PipelineConfig {
        calibration: outcome.fit.params,
        noise: outcome.tuned.apply(&cfg.noise),
        ..cfg.clone()
    };
    match (&outcome.detector, &args.detector_out) {
        (Some(d), Some(path)) => {
            d.save(path)?;
            calibrated.detector = Some(path.clone());
        }
        (None, Some(_)) => eprintln!("outlier labels have a single class; no detector written"),
        _ => {}
    }
    if let Some(path) = &args.config_out {
        calibrated.save(path)?;
    }
    println!(
        "{} pairs, inlier ratio {:.3}, residual {:.3} m, tr(R_LoS) {:.3}, tr(R_NLoS) {:.3}, {} violations",
        outcome.n_pairs,
        outcome.fit.inlier_ratio,
        outcome.fit.inlier_residual,
        outcome.tuned.trace_los(),
        outcome.tuned.trace_nlos(),
        outcome.tuned.violations
    );
    Ok(())
}

fn train_nlos(cfg: &PipelineConfig, args: &TrainArgs) -> Result<()> {
    let data = calibration_data(&args.uwb, &args.tracklets)?;
    let setup = CalibrationSetup::default();
    let camera = CameraModel {
        intrinsics: &cfg.camera.intrinsics,
        extrinsics: &cfg.camera.extrinsics,
    };
    let fit = calibrate_extrinsics(&data, &camera, &cfg.calibration, &setup.extrinsics)?;
    let labels = label_nlos(&fit.outliers);
    let features: Vec<SignalFeatures> = data.pairs.iter().map(|p| p.sample.features.clone()).collect();
    let model = train_detector(&features, &labels, &setup.train, cfg.seed)?;
    model.save(&args.out)?;
    println!("{} samples, {} labelled NLoS, {} trees", labels.len(), labels.iter().filter(|l| l.is_nlos()).count(), model.trees.len());
    Ok(())
}

fn track(cfg: &PipelineConfig, args: &TrackArgs) -> Result<()> {
    let samples = load_uwb(&args.uwb)?;
    let detector = load_detector(cfg)?;
    let tags = track_tags(&samples, cfg, detector.as_ref())?;
    let rows: Vec<_> = tags
        .iter()
        .flat_map(|tag| {
            tag.points.iter().map(move |p| {
                json!({
                    "tag_id": tag.tag_id,
                    "t": p.timestamp,
                    "x": p.position.x,
                    "y": p.position.y,
                    "z": p.position.z,
                    "uncertain": p.uncertain,
                    "nlos": p.nlos,
                })
            })
        })
        .collect();
    save_records(&args.out, &rows)?;
    Ok(())
}

fn match_all(cfg: &PipelineConfig, args: &StreamArgs) -> Result<()> {
    let samples = load_uwb(&args.uwb)?;
    let detections = load_tracklets(&args.tracklets)?;
    let detector = load_detector(cfg)?;
    let tags = track_tags(&samples, cfg, detector.as_ref())?;
    let tracklets = tracklets_from_detections(&detections, &cfg.camera, &cfg.calibration)?;
    let costs = build_cost_matrix(&tags, &tracklets, &cfg.cost_options())?;
    let result = solve_assignment(&costs, &overlap_matrix(&tracklets), cfg.c_th)?;
    let rows: Vec<_> = result
        .pairs
        .iter()
        .map(|&(i, j)| {
            json!({
                "tag_id": tags[i].tag_id,
                "tracklet_id": tracklets[j].tracklet_id,
                "cost": costs.costs[i][j],
            })
        })
        .collect();
    save_records(&args.out, &rows)?;
    println!("{} pairs, objective {}", result.pairs.len(), result.objective);
    Ok(())
}

fn metrics_row(scene_id: &str, cfg: &PipelineConfig, truth: &[TruthRecord], m: &RunMetrics) -> MetricsRow {
    MetricsRow {
        scene_id: scene_id.to_string(),
        n_people: truth.iter().map(|r| r.person_id).collect::<BTreeSet<_>>().len(),
        n_tags: m.n_tags,
        c_th: cfg.c_th,
        u_th: cfg.u_th,
        recall: m.recall,
        misid_rate: m.misid_rate,
        mean_latency_ms: m.mean_latency_ms,
    }
}

fn report_metrics(m: &RunMetrics, row: MetricsRow, out: Option<&Path>) -> Result<()> {
    println!(
        "recall {:.4} ({}/{} frames), misidentification rate {:.4}, mean latency {:.2} ms",
        m.recall, m.correct_frames, m.visible_frames, m.misid_rate, m.mean_latency_ms
    );
    if let Some(path) = out {
        write_metrics_csv(File::create(path)?, &[row])?;
    }
    Ok(())
}

fn scene_id(given: &Option<String>, path: &Path) -> String {
    given.clone().unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    })
}

fn replay(cfg: &PipelineConfig, args: &ReplayArgs) -> Result<()> {
    let samples = load_uwb(&args.streams.uwb)?;
    let detections = load_tracklets(&args.streams.tracklets)?;
    let detector = load_detector(cfg)?;
    let prep = prepare_replay(&samples, &detections, cfg, detector.as_ref())?;
    let out = decide(&prep, cfg.c_th, cfg.window_s, cfg.mode)?;
    save_records(&args.streams.out, &out.decisions)?;
    match &args.truth {
        Some(path) => {
            let truth = load_truth(path)?;
            let m = with_latency(evaluate_recall(&out.decisions, &truth)?, &out.latency_ms);
            let id = scene_id(&args.scene_id, &args.streams.uwb);
            report_metrics(&m, metrics_row(&id, cfg, &truth, &m), args.metrics_out.as_deref())?;
        }
        None if args.metrics_out.is_some() => bail!("--metrics-out needs --truth"),
        None => println!("{} frames, {} tags", out.decisions.len(), out.tag_ids.len()),
    }
    Ok(())
}

fn load_decisions(path: &Path) -> Result<Vec<FrameDecision>> {
    Ok(read_records(BufReader::new(File::open(path)?), &path.display().to_string())?)
}

fn evaluate(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let decisions = load_decisions(&args.decisions)?;
    let truth = load_truth(&args.truth)?;
    let m = evaluate_recall(&decisions, &truth)?;
    let id = scene_id(&args.scene_id, &args.decisions);
    report_metrics(&m, metrics_row(&id, cfg, &truth, &m), args.metrics_out.as_deref())
}

fn sweep(cfg: &PipelineConfig, args: &SweepArgs) -> Result<()> {
    let samples = load_uwb(&args.streams.uwb)?;
    let detections = load_tracklets(&args.streams.tracklets)?;
    let truth = load_truth(&args.truth)?;
    let detector = load_detector(cfg)?;
    let prep = prepare_replay(&samples, &detections, cfg, detector.as_ref())?;
    let points: Vec<SweepPoint> =
        optin_core::pipeline::experiment::sweep_threshold(&prep, &truth, &args.c_values, cfg.window_s, cfg.mode)?;
    write_sweep_csv(File::create(&args.streams.out)?, &points)?;
    println!("area under the recall/misidentification curve {:.4}", pr_auc(&points));
    Ok(())
}

fn mask(args: &MaskArgs) -> Result<()> {
    let frame = Image::load(&args.frame)?;
    let background = Image::load(&args.background)?;
    let decisions = load_decisions(&args.decisions)?;
    let decision = decisions
        .iter()
        .min_by(|a, b| (a.t - args.t).abs().total_cmp(&(b.t - args.t).abs()))
        .context("no decisions in file")?;
    compose_mask(&frame, &background, decision)?.save(&args.out)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Calibrate(a) => calibrate(&cfg, a),
        Command::TrainNlos(a) => train_nlos(&cfg, a),
        Command::Track(a) => track(&cfg, a),
        Command::Match(a) => match_all(&cfg, a),
        Command::Replay(a) => replay(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::Mask(a) => mask(a),
    }
}

/// Malformed input files and configurations, as opposed to failures.
fn is_schema_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return e.is_schema() || matches!(e, PipelineError::Detector(d) if bad_model_file(d));
        }
        cause.downcast_ref::<NlosError>().is_some_and(bad_model_file)
    })
}

fn bad_model_file(e: &NlosError) -> bool {
    matches!(e, NlosError::Json(_) | NlosError::UnsupportedVersion(_) | NlosError::MalformedTree(_))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_schema_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
