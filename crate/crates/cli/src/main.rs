use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demoadapt::adaptors::adapt_demonstration;
use demoadapt::aligner::{fuse, FeatureGrid, SeedFeatures, DEFAULT_NEIGHBORS};
use demoadapt::calibration::{calibrate, calibration_metrics, initial_extrinsics, Calibration, CalibrationMetrics, CalibrationParams, CalibrationProblem};
use demoadapt::evalstats::{summarize, welch_t_test, AccuracyRig, ErrorSummary};
use demoadapt::io::{
    load_calibration, load_dataset, load_markers, load_rig, read_array, save_calibration, save_dataset, save_rig,
    write_array, Array, MetricsSummary, PipelineConfig,
};
use demoadapt::kinematics::Platform;
use demoadapt::pipeline::{run_pipeline, PipelineInputs};
use demoadapt::raster::{render_robot_overlay, SceneModel};
use demoadapt::recording::{load_recording, save_color, save_coverage, save_depth, save_recording};
use demoadapt::synth::{self, DemoSpec, Perturbation};
use demoadapt::trajectory::{resample_indices, ActionRecord, Trajectory};
use demoadapt::{Error, Result};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "demoadapt", version, about = "Turn exoskeleton RGB-D demonstrations into robot-domain demonstrations")]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Camera-from-base extrinsics from marker observations.
    CalibrateInit {
        #[arg(long)]
        markers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render-and-compare refinement of an initial calibration.
    CalibrateRefine {
        /// Annotated calibration samples.
        #[arg(long, alias = "dataset")]
        samples: PathBuf,
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Evaluate finite-difference probes in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Mask and depth differences of a calibration on a dataset.
    CalibrateMetrics {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "calibration")]
        label: String,
    },
    /// Convert one recording to the robot domain.
    Adapt {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inpainting backend name (default from the configuration).
        #[arg(long)]
        inpaint: Option<String>,
    },
    /// Threshold resampling of an action file (one JSON record per line).
    Resample {
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a dense feature grid onto seed points.
    Align(AlignArgs),
    /// Render a platform at given joint values.
    Render {
        #[arg(long)]
        chains: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// JSON array of joint vectors, one per arm.
        #[arg(long)]
        q: String,
        #[arg(long, default_value = "robot")]
        platform: String,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 360)]
        height: usize,
        #[arg(long, default_value_t = 2)]
        supersample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-effector tracking error on a simulated evaluation board.
    EvalAccuracy {
        /// Encoder noise levels, degrees.
        #[arg(long, alias = "noise-sigma", num_args = 1.., default_values_t = [0.05, 0.1, 0.2])]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        holes: usize,
    },
    /// Full pipeline: load, adapt, resample, point clouds, save.
    Run {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Rig file (default: the one named in the recording metadata).
        #[arg(long)]
        chains: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the JSON report here (it always goes to stdout).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Synthetic data for tests and demos.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct AlignArgs {
    /// `[h, w, C]` semantic features.
    #[arg(long)]
    features: PathBuf,
    /// `[h, w, 3]` reference coordinates; NaN marks an invalid cell.
    #[arg(long)]
    coords: PathBuf,
    /// `[N, 3]` seed coordinates.
    #[arg(long)]
    seeds: PathBuf,
    /// `[N, C_g]` geometric features (default: none).
    #[arg(long)]
    seed_features: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    neighbors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Exoskeleton recording with its rig and true calibration.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
        #[arg(long, default_value_t = 90)]
        height: usize,
    },
    /// Annotated calibration dataset, rig, perturbed and true calibrations.
    Scene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
        #[arg(long, default_value_t = 90)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        supersample: usize,
    },
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn platform<'a>(rig: &'a demoadapt::adaptors::Rig, name: &str) -> Result<&'a Platform> {
    match name {
        "robot" => Ok(&rig.robot),
        "exoskeleton" => Ok(&rig.exoskeleton),
        other => Err(Error::config(format!("unknown platform '{other}' (robot or exoskeleton)"))),
    }
}

fn metrics_json(m: &CalibrationMetrics) -> serde_json::Value {
    json!({
        "mask_diff_percent": { "mean": m.mask.mean, "std": m.mask.std },
        "depth_diff_mm": { "mean": m.depth.mean, "std": m.depth.std },
    })
}

fn align(a: &AlignArgs) -> Result<()> {
    let feats = read_array(&a.features)?;
    let coords = read_array(&a.coords)?;
    let seeds = read_array(&a.seeds)?;
    let [h, w, c] = feats.shape[..] else {
        return Err(Error::dim(format!("features must be [h, w, C], got {:?}", feats.shape)));
    };
    if coords.shape != [h, w, 3] {
        return Err(Error::dim(format!("coords must be [{h}, {w}, 3], got {:?}", coords.shape)));
    }
    let [n, 3] = seeds.shape[..] else {
        return Err(Error::dim(format!("seeds must be [N, 3], got {:?}", seeds.shape)));
    };
    let cells: Vec<Vector3<f64>> = coords.data.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let valid = cells.iter().map(|p| p.iter().all(|v| v.is_finite())).collect();
    let grid = FeatureGrid::new(h, w, c, feats.data, cells, valid)?;
    let (cg, geo) = match &a.seed_features {
        Some(p) => {
            let g = read_array(p)?;
            match g.shape[..] {
                [m, cg] if m == n => (cg, g.data),
                _ => return Err(Error::dim(format!("seed features must be [{n}, C_g], got {:?}", g.shape))),
            }
        }
        None => (0, Vec::new()),
    };
    let seed_pts = seeds.data.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let fused = fuse(&SeedFeatures::new(cg, geo, seed_pts)?, &grid, a.neighbors)?;
    write_array(&a.out, &Array::f64(vec![n, fused.channels], fused.features)?)
}

fn eval_accuracy(sigmas: &[f64], trials: usize, holes: usize, seed: u64) -> Result<()> {
    let rig = AccuracyRig::board(holes);
    println!("| Noise (deg) | {} (mm) |", ErrorSummary::HEADER);
    println!("|---|---|");
    let mut per_sigma = Vec::new();
    for &s in sigmas {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut errors = Vec::new();
        let mut means = Vec::new();
        for _ in 0..trials {
            let e = rig.simulate(s, &mut rng)?;
            means.push(e.iter().sum::<f64>() / e.len() as f64);
            errors.extend(e);
        }
        println!("| {s} | {} |", summarize(&errors)?.row());
        per_sigma.push(means);
    }
    for (i, w) in per_sigma.windows(2).enumerate() {
        if let Ok(r) = welch_t_test(&w[0], &w[1]) {
            println!(
                "Welch {} vs {}: t = {:.4}, dof = {:.2}, p = {:.4e}",
                sigmas[i],
                sigmas[i + 1],
                r.t,
                r.dof,
                r.p
            );
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::CalibrateInit { markers, out } => {
            let (cm, bm, q_calib) = load_markers(markers)?;
            let c = Calibration {
                camera_from_base: initial_extrinsics(&cm, &bm),
                q_calib,
            };
            save_calibration(&c, None, out)
        }
        Command::CalibrateRefine {
            samples,
            chains,
            init,
            out,
            beta,
            lr,
            iters,
            parallel,
        } => {
            let rig = load_rig(chains)?;
            let (init, _) = load_calibration(init)?;
            let (samples, k) = load_dataset(samples)?;
            let mut rc = cfg.calibration.refine_config(cfg.seed);
            if let Some(b) = beta {
                rc.loss.beta = *b;
            }
            if let Some(l) = lr {
                rc.lr = *l;
            }
            if let Some(n) = iters {
                rc.iters = *n;
            }
            rc.parallel = *parallel;
            let outcome = calibrate(&rig.exoskeleton, &init, &samples, &k, &rc)?;
            save_calibration(&outcome.calibration, Some(MetricsSummary::from(&outcome.metrics)), out)?;
            print_json(&json!({
                "initial_loss": outcome.refine.initial_loss,
                "loss": outcome.refine.loss,
                "best_iteration": outcome.refine.best_iter,
                "initial_metrics": metrics_json(&outcome.initial_metrics),
                "metrics": metrics_json(&outcome.metrics),
            }));
            Ok(())
        }
        Command::CalibrateMetrics {
            dataset,
            chains,
            calib,
            label,
        } => {
            let rig = load_rig(chains)?;
            let (c, _) = load_calibration(calib)?;
            let (samples, k) = load_dataset(dataset)?;
            let mut loss = cfg.calibration.refine_config(cfg.seed).loss;
            loss.supersample = cfg.calibration.supersample;
            let problem = CalibrationProblem::new(&rig.exoskeleton, &c, &samples, &k, loss)?;
            let m = calibration_metrics(&CalibrationParams::initial(&c), &problem, &samples)?;
            println!("{}", CalibrationMetrics::TABLE_HEADER);
            println!("|---|---|---|");
            println!("{}", m.table_row(label));
            Ok(())
        }
        Command::Adapt {
            demo,
            calib,
            chains,
            out,
            inpaint,
        } => {
            let rec = load_recording(demo)?;
            let rig = load_rig(chains)?;
            let (c, _) = load_calibration(calib)?;
            let registry = cfg.inpaint.registry();
            let backend = registry.get(inpaint.as_deref().unwrap_or(&cfg.inpaint.backend))?;
            let mut adapted = adapt_demonstration(&rec, &c, &rig, &cfg.adapt, backend)?;
            adapted.rig = Some("rig.toml".into());
            save_recording(&adapted, out)?;
            save_rig(&rig, &out.join("rig.toml"))
        }
        Command::Resample { actions, out } => {
            let text = std::fs::read_to_string(actions).map_err(|e| Error::io(actions, e))?;
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    serde_json::from_str::<ActionRecord>(l).map_err(|e| Error::Parse {
                        path: actions.clone(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let traj = Trajectory::new(records)?;
            let idx = resample_indices(&traj, &cfg.sampling)?;
            let mut buf = Vec::new();
            for &i in &idx {
                serde_json::to_writer(&mut buf, &traj.records[i]).expect("records serialize");
                buf.push(b'\n');
            }
            demoadapt::recording::write_atomic(out, &buf)?;
            print_json(&json!({ "input": traj.len(), "retained": idx.len(), "indices": idx }));
            Ok(())
        }
        Command::Align(a) => align(a),
        Command::Render {
            chains,
            calib,
            q,
            platform: which,
            width,
            height,
            supersample,
            out,
        } => {
            let rig = load_rig(chains)?;
            let (c, _) = load_calibration(calib)?;
            let q: Vec<Vec<f64>> = serde_json::from_str(q).map_err(|e| Error::config(format!("--q: {e}")))?;
            let scene = SceneModel {
                platform: platform(&rig, which)?.clone(),
                camera_from_base: c.camera_from_base,
            };
            let k = synth::intrinsics(*width, *height);
            let ov = render_robot_overlay(&scene, &q, &k, *supersample)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            save_color(&ov.color, &out.join("color.png"))?;
            save_depth(&synth::depth_from_meters(&ov.depth), &out.join("depth.png"))?;
            save_coverage(&ov.mask, &out.join("mask.png"))
        }
        Command::EvalAccuracy { sigma, trials, holes } => eval_accuracy(sigma, *trials, *holes, cfg.seed),
        Command::Run {
            demo,
            calib,
            chains,
            out,
            report,
        } => {
            let r = run_pipeline(
                &cfg,
                &PipelineInputs {
                    demo,
                    calibration: calib,
                    rig: chains.as_deref(),
                    out,
                },
            )?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            println!("{text}");
            if let Some(p) = report {
                demoadapt::recording::write_atomic(p, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Synth(SynthCommand::Demo {
            out,
            frames,
            width,
            height,
        }) => {
            let spec = DemoSpec {
                frames: *frames,
                width: *width,
                height: *height,
                ..DemoSpec::default()
            };
            let d = synth::demo(cfg.seed, &spec)?;
            save_recording(&d.recording, out)?;
            save_rig(&d.rig, &out.join("rig.toml"))?;
            save_calibration(&d.calibration, None, &out.join("calibration.toml"))
        }
        Command::Synth(SynthCommand::Scene {
            out,
            samples,
            width,
            height,
            supersample,
        }) => {
            let k = synth::intrinsics(*width, *height);
            let sc = synth::calibration_scene(cfg.seed, *samples, &k, *supersample, Perturbation::default())?;
            save_dataset(&sc.samples, &k, &out.join("dataset"))?;
            let rig = demoadapt::adaptors::Rig {
                exoskeleton: sc.platform.clone(),
                robot: synth::dual_arm(synth::ROBOT_PALETTE),
                mapping: vec![synth::identity_mapping(synth::ARM_DOF); sc.platform.arms.len()],
            };
            save_rig(&rig, &out.join("rig.toml"))?;
            save_calibration(&sc.init, None, &out.join("init.toml"))?;
            save_calibration(&sc.truth, None, &out.join("truth.toml"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
