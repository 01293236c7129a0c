//! Experiment driver: render synthetic data, verify gradients, train
//! models, and score checkpoints, each as one deterministic command.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or
//! malformed files), 3 numeric failure (divergence or a failed gradient
//! check). Set `AWRKIT_THREADS` to cap internal parallelism; results never
//! depend on the thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use awrkit_core::awr::{self, WeightSupport};
use awrkit_core::evalkit;
use awrkit_core::geometry::{denormalize_pose, HandPose};
use awrkit_core::nncore::checkpoint;
use awrkit_core::nncore::gradcheck;
use awrkit_core::nncore::train::write_metrics_csv;
use awrkit_core::nncore::{
    mask_centroid_pose, prepare_frame, train_two_stage, Model, ModelConfig, TrainConfig,
    TrainFrame, TrainMode,
};
use awrkit_core::repcodec::{decode_gt, encode, RepTag, RepType};
use awrkit_core::synthhand::{
    load_dataset, make_dataset, synth_intrinsics, KinematicHand, LoadedFrame, PoseSpace,
    SceneParams,
};
use awrkit_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "awrkit", about = "Depth-based hand pose experiments", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a labelled synthetic depth dataset
    Synth(SynthArgs),
    /// Check every analytic gradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Train a model on a rendered dataset
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a rendered dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of frames to render
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if absent)
    #[arg(long)]
    out: PathBuf,
    /// Depth noise sigma in millimetres
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    /// Probability that a hand pixel drops to background
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random trials per operation
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Negate one op's analytic gradients to prove the harness catches it
    #[arg(long)]
    sabotage: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Representation: P, H1, H2, O1, O2 or O3
    #[arg(long)]
    rep: Option<String>,
    /// `dense` (detection-style supervision only) or `both` (adds the
    /// adaptive-weighting fine-tuning stage)
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    dense_size: Option<usize>,
    /// Offset/closeness kernel radius in normalized units
    #[arg(long)]
    kernel: Option<f64>,
    /// Dense-stage epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Joint-stage epochs (mode `both` only)
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory; defaults to holding out a tenth of
    /// the training frames
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pixels the softmax weighting runs over: `hand` or `all`
    #[arg(long)]
    softmax_span: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// JSON experiment spec; explicit flags override its fields
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Decoder: `awr` (softmax-weighted aggregation) or `argmax`
    /// (detection-style)
    #[arg(long, default_value = "awr")]
    mode: String,
    /// Output prefix; writes PREFIX.report.json, PREFIX.curve.csv and
    /// PREFIX.preds.csv
    #[arg(long)]
    out: PathBuf,
    /// Decode ground-truth-encoded maps instead of model output
    /// (codec round-trip sanity check)
    #[arg(long)]
    oracle_maps: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Pixels the softmax weighting runs over: `hand` or `all`
    #[arg(long, default_value = "hand")]
    softmax_span: String,
}

/// Experiment cell loadable via `--spec`; every field has a flag twin and
/// flags win on conflict.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentSpec {
    rep: Option<String>,
    mode: Option<String>,
    input_size: Option<usize>,
    dense_size: Option<usize>,
    kernel: Option<f64>,
    epochs: Option<usize>,
    joint_epochs: Option<usize>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    val_data: Option<PathBuf>,
    out: Option<PathBuf>,
    softmax_span: Option<String>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    /// Weight of the dense term while fine-tuning; 0 trains the joint
    /// stage on the decoded coordinates alone.
    lambda_dense: Option<f64>,
    lambda_joint: Option<f64>,
    channels: Option<Vec<usize>>,
    trunk_layers: Option<usize>,
}

/// Numeric failure that is not a data problem: reserved exit code 3.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var("AWRKIT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: AWRKIT_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    match e.downcast_ref::<CoreError>() {
        Some(
            CoreError::TrainingDiverged { .. }
            | CoreError::NonFinite { .. }
            | CoreError::UndecodableJoint { .. },
        ) => 3,
        Some(CoreError::InvalidArg(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let scene =
        SceneParams { intr: synth_intrinsics(), noise_sigma_mm: a.noise, dropout: a.dropout };
    let manifest = make_dataset(
        a.frames,
        a.seed,
        &KinematicHand::standard(),
        &PoseSpace::default(),
        &scene,
        &a.out,
    )?;
    println!(
        "wrote {} frames to {} (seed {}, noise {} mm, dropout {})",
        manifest.frames.len(),
        a.out.display(),
        a.seed,
        a.noise,
        a.dropout
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let reports = gradcheck::run_all(a.trials, a.seed, a.sabotage.as_deref())?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<22} trials {:>4}  max_rel {:>12.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(NumericFailure(format!("gradient checks failed: {}", failed.join(", "))).into())
    }
}

fn parse_rep(name: &str, kernel: f64) -> anyhow::Result<RepType> {
    let tag = match name.to_ascii_uppercase().as_str() {
        "P" => RepTag::P,
        "H1" => RepTag::H1,
        "H2" => RepTag::H2,
        "O1" => RepTag::O1,
        "O2" => RepTag::O2,
        "O3" => RepTag::O3,
        other => {
            return Err(CoreError::InvalidArg(format!(
                "unknown representation {other:?} (expected P, H1, H2, O1, O2 or O3)"
            ))
            .into())
        }
    };
    let rep = RepType::with_kernel(tag, kernel);
    rep.validate()?;
    Ok(rep)
}

fn parse_span(name: &str) -> anyhow::Result<WeightSupport> {
    match name {
        "hand" => Ok(WeightSupport::HandMask),
        "all" => Ok(WeightSupport::AllPixels),
        other => Err(CoreError::InvalidArg(format!(
            "unknown softmax span {other:?} (expected hand or all)"
        ))
        .into()),
    }
}

fn prepare_frames(frames: &[LoadedFrame], cfg: &ModelConfig) -> anyhow::Result<Vec<TrainFrame>> {
    let intr = synth_intrinsics();
    let prepared: Vec<awrkit_core::Result<TrainFrame>> = frames
        .par_iter()
        .map(|f| prepare_frame(&f.depth, &f.pose, &intr, cfg))
        .collect();
    let mut out = Vec::with_capacity(prepared.len());
    for (f, r) in frames.iter().zip(prepared) {
        out.push(r.with_context(|| format!("preparing frame {}", f.id))?);
    }
    Ok(out)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let spec: ExperimentSpec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| CoreError::Format(format!("spec {}: {e}", path.display())))?
        }
        None => ExperimentSpec::default(),
    };
    let require = |what: &str| CoreError::InvalidArg(format!("--{what} is required"));

    let rep_name = a.rep.clone().or(spec.rep).ok_or_else(|| require("rep"))?;
    let mode_name = a.mode.clone().or(spec.mode).unwrap_or_else(|| "both".into());
    let data = a.data.clone().or(spec.data).ok_or_else(|| require("data"))?;
    let out = a.out.clone().or(spec.out).ok_or_else(|| require("out"))?;
    let kernel = a.kernel.or(spec.kernel).unwrap_or(1.0);
    let seed = a.seed.or(spec.seed).unwrap_or(0);
    let epochs = a.epochs.or(spec.epochs).unwrap_or(10);
    let joint_epochs = a.joint_epochs.or(spec.joint_epochs).unwrap_or(5);
    let span = a.softmax_span.clone().or(spec.softmax_span).unwrap_or_else(|| "hand".into());
    let val_data = a.val_data.clone().or(spec.val_data);

    let rep = parse_rep(&rep_name, kernel)?;
    let mode = match mode_name.as_str() {
        "dense" => TrainMode::Dense,
        "both" => TrainMode::Both,
        other => {
            return Err(CoreError::InvalidArg(format!(
                "unknown mode {other:?} (expected dense or both)"
            ))
            .into())
        }
    };

    let (manifest, loaded) =
        load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let n_joints = manifest.frames[0].pose.len();

    let mut mcfg = ModelConfig::new(rep, n_joints);
    if let Some(s) = a.input_size.or(spec.input_size) {
        mcfg.input_size = s;
    }
    if let Some(s) = a.dense_size.or(spec.dense_size) {
        mcfg.dense_size = s;
    }
    if let Some(c) = spec.channels {
        mcfg.channels = c;
    }
    if let Some(t) = spec.trunk_layers {
        mcfg.trunk_layers = t;
    }
    mcfg.validate()?;

    let mut tcfg = TrainConfig {
        dense_epochs: epochs,
        joint_epochs,
        seed,
        support: parse_span(&span)?,
        ..TrainConfig::default()
    };
    if let Some(b) = a.batch_size.or(spec.batch_size) {
        tcfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate.or(spec.learning_rate) {
        tcfg.learning_rate = lr;
    }
    if let Some(ld) = spec.lambda_dense {
        tcfg.lambda_dense = ld;
    }
    if let Some(lj) = spec.lambda_joint {
        tcfg.lambda_joint = lj;
    }

    let (train_frames, val_frames) = match val_data {
        Some(dir) => {
            let (_, val_loaded) = load_dataset(&dir)
                .with_context(|| format!("loading validation dataset {}", dir.display()))?;
            (prepare_frames(&loaded, &mcfg)?, prepare_frames(&val_loaded, &mcfg)?)
        }
        None => {
            let n_val = (loaded.len() / 10).max(1);
            if loaded.len() <= n_val {
                return Err(CoreError::InvalidArg(format!(
                    "{} frames is too few to hold out a validation split",
                    loaded.len()
                ))
                .into());
            }
            let split = loaded.len() - n_val;
            (prepare_frames(&loaded[..split], &mcfg)?, prepare_frames(&loaded[split..], &mcfg)?)
        }
    };

    let mut model = Model::init(mcfg, seed)?;
    println!(
        "training {} ({} params) on {} frames, validating on {}",
        rep_name.to_ascii_uppercase(),
        model.n_params(),
        train_frames.len(),
        val_frames.len()
    );
    let logs = train_two_stage(&mut model, &train_frames, &val_frames, &tcfg, mode)?;
    for log in &logs {
        let joint = log
            .joint_loss
            .map_or(String::new(), |j| format!("  joint_loss {j:.6}"));
        let val = log
            .val_error_mm
            .map_or(String::new(), |v| format!("  val {v:.3} mm"));
        println!(
            "epoch {:>3} [{}]  dense_loss {:.6}{joint}{val}  lr {:.2e}",
            log.epoch, log.stage, log.dense_loss, log.learning_rate
        );
    }

    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(&model, logs.len(), seed, &out)?;
    let metrics = PathBuf::from(format!("{}.metrics.csv", out.display()));
    write_metrics_csv(&metrics, &logs)?;
    println!("checkpoint {}", out.display());
    println!("metrics    {}", metrics.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let adaptive = match a.mode.as_str() {
        "awr" => true,
        "argmax" => false,
        other => {
            return Err(CoreError::InvalidArg(format!(
                "unknown decoder {other:?} (expected awr or argmax)"
            ))
            .into())
        }
    };
    let support = parse_span(&a.softmax_span)?;
    if !(a.temperature.is_finite() && a.temperature > 0.0) {
        return Err(CoreError::InvalidArg(format!(
            "temperature must be positive, got {}",
            a.temperature
        ))
        .into());
    }
    let (model, _, _) = checkpoint::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let (_, frames) = load_dataset(&a.data)
        .with_context(|| format!("loading dataset {}", a.data.display()))?;

    struct Decoded {
        pred: HandPose,
        fallback: bool,
    }
    let decoded: Vec<awrkit_core::Result<Decoded>> = frames
        .par_iter()
        .map(|f| {
            let tf = prepare_frame(&f.depth, &f.pose, &synth_intrinsics(), &model.cfg)?;
            let norm = if a.oracle_maps {
                let dense = encode(model.cfg.rep, &f.pose, &tf.crop, model.cfg.dense_size)?;
                Ok(decode_gt(&dense, &tf.crop)?)
            } else {
                let (dense, logits) = model.predict_dense(&tf.input)?;
                if adaptive {
                    awr::recover_candidates(&dense, logits.as_deref(), &tf.grid, support)
                        .and_then(|c| awr::awr_aggregate(&c, a.temperature))
                } else {
                    awr::detection_decode(&dense, &tf.grid)
                }
            };
            let (norm, fallback) = match norm {
                Ok(p) => (p, false),
                Err(CoreError::UndecodableJoint { .. }) => {
                    (mask_centroid_pose(&tf.grid, model.cfg.n_joints), true)
                }
                Err(e) => return Err(e),
            };
            Ok(Decoded { pred: denormalize_pose(&norm, &tf.crop), fallback })
        })
        .collect();

    let mut preds = Vec::with_capacity(frames.len());
    let mut fallbacks = 0usize;
    for (f, r) in frames.iter().zip(decoded) {
        let d = r.with_context(|| format!("decoding frame {}", f.id))?;
        fallbacks += usize::from(d.fallback);
        preds.push(d.pred);
    }
    let gts: Vec<HandPose> = frames.iter().map(|f| f.pose.clone()).collect();
    let visibility: Vec<Vec<bool>> = frames.iter().map(|f| f.visibility.clone()).collect();
    let ids: Vec<String> = frames.iter().map(|f| f.id.clone()).collect();

    let result = evalkit::evaluate(&preds, &gts, &visibility, &evalkit::default_thresholds())?;

    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let report_path = PathBuf::from(format!("{}.report.json", a.out.display()));
    let curve_path = PathBuf::from(format!("{}.curve.csv", a.out.display()));
    let preds_path = PathBuf::from(format!("{}.preds.csv", a.out.display()));
    std::fs::write(&report_path, serde_json::to_vec_pretty(&result)?)?;
    let mut curve = String::from("threshold_mm,fraction\n");
    for &(t, frac) in &result.good_frame_curve {
        curve.push_str(&format!("{t},{frac}\n"));
    }
    std::fs::write(&curve_path, curve)?;
    evalkit::write_preds_csv(&preds_path, &ids, &preds)?;

    let fmt_mm = |m: Option<f64>| m.map_or("n/a".into(), |v| format!("{v:.3} mm"));
    println!(
        "all-joint mean {:.3} mm over {} frames ({} fallback decodes)",
        result.all_joint_mean_mm, result.n_frames, fallbacks
    );
    println!(
        "visible {} ({} obs), occluded {} ({} obs)",
        fmt_mm(result.visible.all_joint_mean_mm),
        result.visible.n_observations,
        fmt_mm(result.occluded.all_joint_mean_mm),
        result.occluded.n_observations
    );
    println!("report  {}", report_path.display());
    println!("curve   {}", curve_path.display());
    println!("preds   {}", preds_path.display());
    Ok(())
}
