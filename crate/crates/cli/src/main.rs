use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use itermvs::config::{FusionConfig, TrainConfig};
use itermvs::error::MvsError;
use itermvs::eval::{evaluate, ground_truth_cloud};
use itermvs::gradsuite::{run_suite, SuiteConfig};
use itermvs::io::save_mask;
use itermvs::model::IterMvs;
use itermvs::pipeline::{fuse_scene, infer_scene, load_fusion_views, save_estimates};
use itermvs::ply::{read_ply, write_ply};
use itermvs::scene::Scene;
use itermvs::synth::{synth_scene, SynthSpec};
use itermvs::train::train;
use itermvs_tensor::{checkpoint, Exec};

#[derive(Parser, Debug)]
#[command(name = "itermvs", version, about = "Iterative probability estimation for multi-view stereo")]
struct Cli {
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene with exact ground truth.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Estimate depth and confidence for every view of a scene.
    Infer(InferArgs),
    /// Filter estimates and fuse them into a point cloud.
    Fuse(FuseArgs),
    /// Compare a point cloud with the scene's ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    quads: usize,
    #[arg(long, default_value_t = 2.5)]
    texture_freq: f64,
    #[arg(long, default_value_t = 3)]
    supersample: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory; repeat for several.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Generate this many 64x64 synthetic training scenes instead.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Seed of the first synthetic scene; the rest follow consecutively.
    #[arg(long, default_value_t = 1000)]
    synthetic_seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from these parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model shape; must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    /// Also write the last distribution per pixel as CSV.
    #[arg(long)]
    prob: bool,
    /// Accepted for uniformity; inference draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory of `infer`.
    #[arg(long)]
    depths: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    ngeo: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Write per-view acceptance masks as PGM here.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ply: PathBuf,
    /// Distance threshold in scene units; defaults to `relative` times
    /// the scene's depth extent.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    relative: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only cases whose name contains this.
    #[arg(long)]
    op: Option<String>,
    /// Skip the full-model case.
    #[arg(long)]
    quick: bool,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<MvsError> for Failure {
    fn from(e: MvsError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<itermvs_tensor::TensorError> for Failure {
    fn from(e: itermvs_tensor::TensorError) -> Self {
        MvsError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn load_scene(dir: &Path) -> Result<Scene, Failure> {
    require(dir, "scene directory")?;
    Ok(Scene::load(dir)?)
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => {
            require(p, "config file")?;
            Ok(TrainConfig::load(p)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let spec = SynthSpec {
        seed: a.seed,
        quads: a.quads,
        texture_freq: a.texture_freq,
        views: a.views,
        height: a.height,
        width: a.width,
        supersample: a.supersample,
    };
    let scene = synth_scene(&spec)?;
    scene.save(&a.out)?;
    println!("wrote {} views to {}", scene.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Outcome {
    let mut cfg = train_config(a.config.as_deref())?;
    for s in &a.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.metrics.is_some() {
        cfg.metrics = a.metrics;
    }
    cfg.validate()?;
    let mut dirs = a.data;
    if let Some(d) = &cfg.train_data {
        dirs.push(d.clone());
    }
    let mut scenes = Vec::new();
    for d in &dirs {
        scenes.push(load_scene(d)?);
    }
    if let Some(n) = a.synthetic {
        for i in 0..n {
            scenes.push(synth_scene(&SynthSpec {
                seed: a.synthetic_seed + i,
                ..SynthSpec::default()
            })?);
        }
    }
    if scenes.is_empty() {
        return Err(invalid("no training data: pass --data or --synthetic"));
    }
    if cfg.checkpoint.is_none() {
        return Err(invalid("no checkpoint path: pass --checkpoint"));
    }
    let init = match &a.init {
        Some(p) => {
            require(p, "checkpoint")?;
            Some(checkpoint::load::<f32>(p)?)
        }
        None => None,
    };
    let res = train(&cfg, &scenes, init, exec, |r| {
        println!(
            "step {:>5} epoch {:>3} lr {:.2e} L_full {:.4} eta_error {:.4}",
            r.step, r.epoch, r.lr, r.breakdown.full, r.eta_error
        );
    })?;
    println!(
        "{} steps, {} samples skipped, checkpoint {}",
        res.history.len(),
        res.skipped,
        cfg.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

fn infer_cmd(a: InferArgs, exec: Exec) -> Outcome {
    let cfg = train_config(a.config.as_deref())?;
    let scene = load_scene(&a.scene)?;
    require(&a.checkpoint, "checkpoint")?;
    let model = IterMvs::new(cfg.model.clone())?;
    let store = checkpoint::load::<f32>(&a.checkpoint)?;
    let expected = model.init_params::<f32>(0)?;
    if store.len() != expected.len() || store.iter().zip(expected.iter()).any(|(a, b)| a.name != b.name || a.value.dims() != b.value.dims()) {
        return Err(invalid("checkpoint does not match the model configuration"));
    }
    let estimates = infer_scene(&model, &store, &scene, a.views, a.iters, exec)?;
    save_estimates(&a.out, &estimates, a.prob)?;
    println!("wrote {} depth maps to {}", estimates.len(), a.out.display());
    Ok(())
}

fn fuse_cmd(a: FuseArgs, exec: Exec) -> Outcome {
    let mut fc: FusionConfig = train_config(a.config.as_deref())?.fusion;
    fc.tau = a.tau.unwrap_or(fc.tau);
    fc.n_geo = a.ngeo.unwrap_or(fc.n_geo);
    fc.delta = a.delta.unwrap_or(fc.delta);
    fc.epsilon = a.epsilon.unwrap_or(fc.epsilon);
    if !(0.0..=1.0).contains(&fc.tau) || !(fc.delta > 0.0) || !(fc.epsilon > 0.0) {
        return Err(invalid("tau must lie in [0, 1]; delta and epsilon must be positive"));
    }
    let scene = load_scene(&a.scene)?;
    require(&a.depths, "estimate directory")?;
    let views = load_fusion_views(&scene, &a.depths)?;
    let (cloud, stats) = fuse_scene(&scene, &views, &fc, exec)?;
    write_ply(&cloud, &a.out)?;
    if let Some(dir) = &a.masks {
        let (h, w) = scene.size();
        for (i, s) in stats.iter().enumerate() {
            save_mask(&dir.join(format!("{i:04}.pgm")), &s.mask, h, w)?;
        }
    }
    for (i, s) in stats.iter().enumerate() {
        println!("view {i}: confident {} consistent {} accepted {}", s.confident, s.consistent, s.accepted);
    }
    println!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let scene = load_scene(&a.scene)?;
    require(&a.ply, "point cloud")?;
    let pc = read_ply(&a.ply)?;
    let gt = ground_truth_cloud(&scene);
    let extent = scene.depth_extent();
    let threshold = a.threshold.unwrap_or(a.relative * extent);
    if !(threshold > 0.0) {
        return Err(invalid("threshold must be positive"));
    }
    let m = evaluate(&pc, &gt, threshold)?;
    println!("points {}", pc.len());
    println!("threshold {threshold}");
    println!("accuracy {}", m.accuracy);
    println!("completeness {}", m.completeness);
    println!("overall {}", m.overall);
    println!("overall_relative {}", m.overall / extent);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    if a.instances == 0 {
        return Err(invalid("--instances must be positive"));
    }
    let cfg = SuiteConfig {
        instances: a.instances,
        seed: a.seed,
        filter: a.op,
        include_model: !a.quick,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg, |c| println!("{}", c.line()))?;
    if report.cases.is_empty() {
        return Err(invalid("no case matches --op"));
    }
    println!("{} cases in {:.1?}", report.cases.len(), report.elapsed);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} case(s) exceed the tolerance: {}",
            report.failing().len(),
            report.failing().iter().map(|c| c.name).collect::<Vec<_>>().join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, exec),
        Command::Infer(a) => infer_cmd(a, exec),
        Command::Fuse(a) => fuse_cmd(a, exec),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
