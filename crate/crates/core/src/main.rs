use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use vidslam::eval::{ate_rmse, count_models, count_registered, detect_breaks, rpe, EvalError, Trajectory};
use vidslam::io::{self, IoError, RunManifest};
use vidslam::pipeline::{
    estimate_focal, post_refine, select_init_frames, InitContext, Pipeline, PipelineConfig, PipelineError,
    ReconstructionState,
};
use vidslam::sim::{generate, standard_world, SimError};

#[derive(Parser)]
#[command(name = "vidslam", version, about = "Monocular SLAM backend on simulated front-end bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset bundle from a preset name or a world.json spec.
    Simulate {
        #[arg(long)]
        world: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct a bundle.
    Run {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Robustness and accuracy metrics for a TUM trajectory.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 10.0)]
        threshold: f64,
        /// Compare ratios against threshold times their global mean.
        #[arg(long)]
        literal_global: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate the focal length from the initialization frames.
    Focal {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    no_loop: bool,
}

enum Failure {
    Usage(String),
    Format(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Format(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Format(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::UnknownKey { .. } | IoError::InvalidValue { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Format(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::FrameMismatch(_) => Failure::Format(e.to_string()),
            EvalError::DegenerateCollinear => Failure::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { world, out, seed } => simulate(&world, &out, seed),
        Command::Run { bundle, config, out, overrides } => run(&bundle, config.as_deref(), &out, &overrides),
        Command::Eval { est, reference, k, threshold, literal_global, report } => {
            eval(&est, reference.as_deref(), k, threshold, literal_global, report.as_deref())
        }
        Command::Focal { bundle, config, overrides } => focal(&bundle, config.as_deref(), &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn simulate(world: &str, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let path = Path::new(world);
    let mut spec = if path.is_file() { io::read_world(path)? } else { standard_world(world, seed.unwrap_or(0))? };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let t0 = Instant::now();
    let bundle = generate(&spec)?;
    let gen_secs = t0.elapsed().as_secs_f64();
    io::write_bundle(&bundle, Some(&spec), out)?;
    let mut m = RunManifest::new("simulate", spec.seed, serde_json::to_string(&spec).expect("world spec serializes"));
    m.outputs.insert("bundle".into(), io::hash_dir(out)?);
    m.timings.insert("generate".into(), gen_secs);
    m.write(&out.join("manifest.json"))?;
    println!("wrote {} frames to {}", bundle.frames.len(), out.display());
    Ok(())
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => io::parse_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(mu) = o.mu {
        cfg.mu = mu;
    }
    if o.no_mask {
        cfg.use_masks = false;
    }
    if o.no_loop {
        cfg.loop_closure = false;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

const RUN_OUTPUTS: [&str; 5] = ["traj_est.txt", "keyframes.txt", "events.jsonl", "pose_graph.txt", "report.txt"];

fn run(bundle_dir: &Path, config: Option<&Path>, out: &Path, o: &Overrides) -> Result<(), Failure> {
    let cfg = load_config(config, o)?;
    let t0 = Instant::now();
    let bundle = io::read_bundle(bundle_dir)?;
    let mut timings = vec![("read".to_string(), t0.elapsed().as_secs_f64())];

    let t0 = Instant::now();
    let mode = cfg.post_refine;
    let mut p = Pipeline::new(&bundle, cfg.clone())?;
    p.run_to_end()?;
    timings.push(("track".into(), t0.elapsed().as_secs_f64()));
    let t0 = Instant::now();
    let refine = post_refine(&mut p, mode);
    timings.push(("refine".into(), t0.elapsed().as_secs_f64()));
    let diverged = match refine {
        Ok(_) => None,
        Err(e @ PipelineError::RefinementDiverged { .. }) => Some(e),
        Err(e) => return Err(e.into()),
    };

    let gt_path = bundle_dir.join("gt_traj.txt");
    let gt = if gt_path.is_file() { Some(io::read_tum(&gt_path)?) } else { None };
    write_run_outputs(&p.state, gt.as_ref(), out)?;
    let mut m = RunManifest::new("run", cfg.seed, io::config_text(&cfg));
    m.input_hash = Some(io::hash_dir(bundle_dir)?);
    m.record_outputs(out, &RUN_OUTPUTS)?;
    m.timings.extend(timings);
    m.write(&out.join("manifest.json"))?;
    match diverged {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn write_run_outputs(state: &ReconstructionState, gt: Option<&Trajectory>, out: &Path) -> Result<(), Failure> {
    let traj = state.trajectory();
    io::write_tum(&traj, &out.join("traj_est.txt"))?;
    let kf = Trajectory { entries: traj.entries.iter().filter(|e| state.keyframe(e.frame_id).is_some()).copied().collect() };
    io::write_tum(&kf, &out.join("keyframes.txt"))?;
    let mut events = String::new();
    for e in &state.events {
        events.push_str(&serde_json::to_string(e).expect("events serialize"));
        events.push('\n');
    }
    io::write_text(&out.join("events.jsonl"), &events)?;
    let graph = state.pose_graph.as_ref().map(|g| g.dump()).unwrap_or_default();
    io::write_text(&out.join("pose_graph.txt"), &graph)?;

    let mut r = String::new();
    let _ = writeln!(r, "frames = {}", traj.len());
    let _ = writeln!(r, "keyframes = {}", state.keyframes.len());
    let _ = writeln!(r, "loop_closures = {}", state.loop_count());
    let _ = writeln!(r, "focal = {}", io::fmt_sig9(state.intrinsics.fx));
    let _ = writeln!(r, "focal_init = {}", io::fmt_sig9(state.k_init.fx));
    r.push_str(&metrics_text(&traj, gt, 10, 10.0, false));
    io::write_text(&out.join("report.txt"), &r)?;
    Ok(())
}

/// `metric = value` lines; accuracy metrics only when a reference is given.
fn metrics_text(est: &Trajectory, reference: Option<&Trajectory>, k: usize, threshold: f64, literal: bool) -> String {
    let breaks = detect_breaks(est, k, threshold, literal);
    let mut r = String::new();
    let _ = writeln!(r, "registered = {}", count_registered(est));
    let _ = writeln!(r, "models = {}", count_models(est));
    let _ = writeln!(r, "breaks = {}", breaks.indices.len());
    let idx: Vec<String> = breaks.indices.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(r, "break_indices = {}", idx.join(","));
    if let Some(gt) = reference {
        let v = |x: Result<f64, EvalError>| x.map(io::fmt_sig9).unwrap_or_else(|_| "nan".into());
        let _ = writeln!(r, "ate_rmse = {}", v(ate_rmse(est, gt)));
        let _ = writeln!(r, "rpe_1 = {}", v(rpe(est, gt, 1)));
        let _ = writeln!(r, "rpe_10 = {}", v(rpe(est, gt, 10)));
    }
    r
}

fn eval(est: &Path, reference: Option<&Path>, k: usize, threshold: f64, literal: bool, report: Option<&Path>) -> Result<(), Failure> {
    let est = io::read_tum(est)?;
    let reference = reference.map(io::read_tum).transpose()?;
    if let Some(gt) = &reference {
        if gt.len() != est.len() {
            return Err(EvalError::FrameMismatch(format!("{} vs {} entries", est.len(), gt.len())).into());
        }
    }
    let text = metrics_text(&est, reference.as_ref(), k, threshold, literal);
    print!("{text}");
    if let Some(path) = report {
        io::write_text(path, &text)?;
    }
    Ok(())
}

fn focal(bundle_dir: &Path, config: Option<&Path>, o: &Overrides) -> Result<(), Failure> {
    let cfg = load_config(config, o)?;
    let bundle = io::read_bundle(bundle_dir)?;
    let index = vidslam::bundle::BundleIndex::new(&bundle);
    let frames = select_init_frames(&bundle, &index, cfg.n_init, cfg.flow_threshold_px, cfg.use_masks)?;
    let ctx = InitContext::new(&bundle, &index, &frames, &cfg)?;
    let est = estimate_focal(&ctx, cfg.huber_delta)?;
    let ids: Vec<String> = frames.iter().map(|f| f.to_string()).collect();
    println!("init_frames = {}", ids.join(","));
    println!("focal = {}", io::fmt_sig9(est.intrinsics.fx));
    println!("score = {}", io::fmt_sig9(est.score));
    println!("rotation_only_score = {}", io::fmt_sig9(est.rotation_only_score));
    Ok(())
}
