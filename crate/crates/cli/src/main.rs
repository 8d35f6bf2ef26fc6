use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mocap_surface::body::toy::{joint_limits, toy_model};
use mocap_surface::body::BodyModel;
use mocap_surface::data::{synth_generate, Dataset, GroundTruth, SynthConfig};
use mocap_surface::eval::{evaluate, scan_to_model, Scan, JITTER_THRESHOLD};
use mocap_surface::geometry::{mesh_from_obj, mesh_to_obj, points_from_flat};
use mocap_surface::inference::{infer, Predictions};
use mocap_surface::losses::{EulerLimits, QuaternionBounds};
use mocap_surface::networks::Checkpoint;
use mocap_surface::training::{write_metrics, TrainConfig, Trainer};
use mocap_surface::verify::{gradient_suite, GRADIENT_TOLERANCE};
use mocap_surface::{Error, Result};

/// Body shape and pose estimation from sparse surface landmarks.
#[derive(Parser)]
#[command(name = "mocap-surface", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// Body model archive; the built-in toy body when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic landmark dataset and its ground truth.
    Synth {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 2048)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of landmarks dropped per frame.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
        #[arg(long, default_value_t = 64)]
        sequence_length: usize,
        /// Half-width in radians of every global-orientation Euler angle.
        #[arg(long)]
        root_range: Option<f64>,
        /// Landmark table (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth archive.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train the networks stage by stage.
    Train {
        #[command(flatten)]
        model: ModelArg,
        /// TOML training configuration; defaults for absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict pose, shape and placement for every frame.
    Infer {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prediction table (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Posed joint table (CSV).
        #[arg(long)]
        joints: Option<PathBuf>,
        /// Directory receiving one OBJ mesh per frame.
        #[arg(long)]
        meshes: Option<PathBuf>,
        /// Export at most this many meshes.
        #[arg(long)]
        mesh_limit: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Compare predictions with ground truth and optionally a scan.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth archive with the same frames in the same order.
        #[arg(long)]
        truth: PathBuf,
        /// Scan mesh (OBJ) compared with the predicted surface of `--scan-frame`.
        #[arg(long)]
        scan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scan_frame: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training configuration whose fingerprint goes into the report.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Machine-readable report (CSV).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Text report; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average shape per sequence and remove single-frame pose spikes.
    Smooth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = JITTER_THRESHOLD)]
        threshold: f64,
        /// Only average the shape.
        #[arg(long)]
        no_jitter: bool,
    },
    /// Check every loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_model(arg: &ModelArg) -> Result<BodyModel> {
    match &arg.model {
        Some(p) => BodyModel::load(p),
        None => toy_model(),
    }
}

/// Euler limits for the model's joints: the toy table when it fits,
/// otherwise ±0.5 rad everywhere.
fn limits_for(model: &BodyModel) -> Vec<EulerLimits> {
    let toy = joint_limits();
    if toy.len() == model.joint_count() {
        toy
    } else {
        vec![[[-0.5, 0.5]; 3]; model.joint_count()]
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::format(dir, e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            model,
            frames,
            seed,
            missing_rate,
            sequence_length,
            root_range,
            out,
            truth,
        } => {
            let model = load_model(&model)?;
            let mut cfg = SynthConfig {
                frames,
                seed,
                missing_rate,
                sequence_length,
                ..SynthConfig::default()
            };
            if let Some(r) = root_range {
                cfg.root_limits = [[-r, r]; 3];
            }
            let (data, gt) = synth_generate(&model, &limits_for(&model), &cfg)?;
            data.save(&out)?;
            gt.save(&truth)?;
            log::info!("wrote {} frames to {}", data.len(), out.display());
        }
        Command::Train { model, config, data, out } => {
            let model = load_model(&model)?;
            let cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let data = Dataset::load(&data, model.landmarks())?;
            let bounds = QuaternionBounds::from_euler_limits(&limits_for(&model), Some(model.tree().root()), 2000, cfg.seed);
            create_dir(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let outcomes = Trainer::new(&model, bounds, cfg)?.train(&data)?;
            let mut log = Vec::new();
            for (i, o) in outcomes.iter().enumerate() {
                write_metrics(&o.metrics, &mut log, i == 0)?;
                o.best.save(&out.join(format!("{}.ckpt", o.stage)))?;
                println!("{}: best validation at step {}", o.stage, o.best_step);
            }
            fs::write(out.join("metrics.csv"), log)?;
            if let Some(last) = outcomes.last() {
                last.best.save(&out.join("final.ckpt"))?;
            }
        }
        Command::Infer {
            model,
            checkpoint,
            data,
            out,
            joints,
            meshes,
            mesh_limit,
            batch_size,
        } => {
            let model = load_model(&model)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = Dataset::load(&data, model.landmarks())?;
            let pred = infer(&ck, &model, &data, batch_size)?;
            pred.save(&out)?;
            if joints.is_some() || meshes.is_some() {
                let bodies = pred.bodies(&model, batch_size)?;
                let (m, p) = (model.joint_count(), model.vertex_count());
                if let Some(path) = joints {
                    let mut s = String::from("sequence,frame");
                    for j in 0..m {
                        s.push_str(&format!(",j{j}.x,j{j}.y,j{j}.z"));
                    }
                    s.push('\n');
                    for (i, row) in bodies.joints.data().chunks(m * 3).enumerate() {
                        s.push_str(&format!("{},{}", pred.sequences[i], pred.frames[i]));
                        for x in row {
                            s.push_str(&format!(",{x}"));
                        }
                        s.push('\n');
                    }
                    fs::write(&path, s).map_err(|e| Error::format(&path, e.to_string()))?;
                }
                if let Some(dir) = meshes {
                    create_dir(&dir)?;
                    let limit = mesh_limit.unwrap_or(usize::MAX);
                    for (i, row) in bodies.vertices.data().chunks(p * 3).enumerate().take(limit) {
                        let name = format!("{}_{:05}.obj", pred.sequences[i], pred.frames[i]);
                        fs::write(dir.join(name), mesh_to_obj(&points_from_flat(row), model.faces()))?;
                    }
                }
            }
        }
        Command::Eval {
            model,
            pred,
            truth,
            scan,
            scan_frame,
            samples,
            seed,
            config,
            csv,
            out,
        } => {
            let model = load_model(&model)?;
            let pred = Predictions::load(&pred)?;
            let truth = GroundTruth::load(&truth)?;
            let mut report = evaluate(&pred, &model, &truth, 256)?;
            if let Some(p) = &config {
                report.fingerprint = Some(TrainConfig::load(p)?.fingerprint());
            }
            if let Some(path) = &scan {
                let text = fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
                let (vertices, faces) = mesh_from_obj(&text).map_err(|e| Error::format(path, e))?;
                if scan_frame >= pred.len() {
                    return Err(Error::Data(format!("scan frame {scan_frame} out of {} frames", pred.len())));
                }
                let bodies = pred.bodies(&model, 256)?;
                let p = model.vertex_count();
                let surface = points_from_flat(&bodies.vertices.data()[scan_frame * p * 3..(scan_frame + 1) * p * 3]);
                let scan = if faces.is_empty() {
                    Scan::Cloud(&vertices)
                } else {
                    Scan::Mesh {
                        vertices: &vertices,
                        faces: &faces,
                    }
                };
                report.scan_to_model = Some(scan_to_model(scan, &surface, samples, &mut ChaCha8Rng::seed_from_u64(seed))?);
            }
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = out {
                fs::write(&p, &text).map_err(|e| Error::format(&p, e.to_string()))?;
            }
            if let Some(p) = csv {
                fs::write(&p, report.to_csv()).map_err(|e| Error::format(&p, e.to_string()))?;
            }
        }
        Command::Smooth {
            pred,
            out,
            threshold,
            no_jitter,
        } => {
            if !(threshold >= 0.0) {
                return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
            }
            let smoothed = Predictions::load(&pred)?.smoothed((!no_jitter).then_some(threshold))?;
            smoothed.save(&out)?;
        }
        Command::Gradcheck { points, seed } => {
            let mut failed = Vec::new();
            for c in gradient_suite(points, seed)? {
                let verdict = if c.passed() { "ok" } else { "FAILED" };
                println!(
                    "{:<14} {} points ({} redrawn)  worst relative error {:.2e}  {verdict}",
                    c.name, c.points, c.redrawn, c.worst_rel_error
                );
                if !c.passed() {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::numeric(
                    "gradcheck",
                    format!("{} above tolerance {GRADIENT_TOLERANCE:e}", failed.join(", ")),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
