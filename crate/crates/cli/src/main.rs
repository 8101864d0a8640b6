use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffrast_core::gradcheck::{gradcheck_config, perturbed_problem, GradcheckOptions, ProblemError};
use diffrast_core::io::png::{save_png, BitDepth, PngError};
use diffrast_core::objective::render_views;
use diffrast_core::optim::ParamSet;
use diffrast_core::{parse_scene, run_task, with_workers, Image, ParamGroup, Precision, SceneConfig, TaskError};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Differentiable triangle rasterizer: render scenes, recover scene
/// parameters from images, and check analytic gradients.
#[derive(Debug, Parser)]
#[command(name = "diffrast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every view to color.png, alpha.png and depth.png.
    Render(CommonArgs),
    /// Run the config's round-trip task and write loss.csv, snapshots,
    /// mesh.obj and report.txt.
    Optimize(OptimizeArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Scene configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Random seed for view sampling and initialization.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Soft silhouette smoothness (squared NDC units).
    #[arg(long, value_name = "F")]
    delta: Option<f64>,
    /// Worker threads for rendering; output does not depend on it.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Resolution override, e.g. 64x64.
    #[arg(long, value_name = "WxH", value_parser = parse_resolution)]
    res: Option<[usize; 2]>,
    /// Arithmetic precision of images, losses and gradients.
    #[arg(long, value_enum, value_name = "single|double")]
    precision: Option<PrecisionArg>,
    /// Do not echo the resolved config.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of Adam iterations.
    #[arg(long, value_name = "N")]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter group to check; repeat for several. Defaults to every group
    /// the scene supports.
    #[arg(long = "group", value_name = "NAME")]
    groups: Vec<ParamGroup>,
    /// Coordinates sampled per group.
    #[arg(long, value_name = "N", default_value_t = 64)]
    samples: usize,
    /// Finite-difference step.
    #[arg(long, value_name = "H", default_value_t = 1e-4)]
    step: f64,
    /// Maximum relative error of a passing sample.
    #[arg(long, value_name = "TOL", default_value_t = 1e-3)]
    tolerance: f64,
    /// Independently jittered check points per group.
    #[arg(long, value_name = "N", default_value_t = 1)]
    points: usize,
}

fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok([parse(w)?, parse(h)?])
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn config_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn runtime_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

fn task_failure(e: TaskError) -> Failure {
    match e {
        TaskError::NoTask | TaskError::Config(_) | TaskError::Setup { .. } => config_failure(e),
        other => runtime_failure(other),
    }
}

fn load_config(args: &CommonArgs) -> Result<(SceneConfig, PathBuf), Failure> {
    let mut cfg = parse_scene(&args.config).map_err(config_failure)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(delta) = args.delta {
        cfg.soft.delta = delta;
    }
    if let Some(w) = args.workers {
        cfg.workers = Some(w);
    }
    if let Some(res) = args.res {
        cfg.resolution = res;
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        };
    }
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok((cfg, base))
}

fn prepare_output(cfg: &SceneConfig, args: &CommonArgs) -> Result<(), Failure> {
    cfg.validate().map_err(config_failure)?;
    std::fs::create_dir_all(&args.out).map_err(|e| runtime_failure(format!("{}: {e}", args.out.display())))?;
    let json = cfg.resolved_json();
    if !args.quiet {
        println!("{json}");
    }
    let path = args.out.join("config.json");
    std::fs::write(&path, json + "\n").map_err(|e| runtime_failure(format!("{}: {e}", path.display())))
}

/// Covered pixels get `1 - 0.8 t` where `t` runs from nearest to farthest.
fn depth_image(depth: &[f64], covered: &[bool], width: usize, height: usize) -> Image {
    let (lo, hi) = depth
        .iter()
        .zip(covered)
        .filter(|(_, &c)| c)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&d, _)| (lo.min(d), hi.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = depth
        .iter()
        .zip(covered)
        .map(|(&d, &c)| if c { 1.0 - 0.8 * (d - lo) / span } else { 0.0 })
        .collect();
    Image::from_vec(width, height, 1, data).expect("depth buffer size")
}

fn render(args: &CommonArgs) -> Result<(), Failure> {
    let (cfg, base) = load_config(args)?;
    prepare_output(&cfg, args)?;
    let scene = cfg.build_scene(&base).map_err(config_failure)?;
    let views = with_workers(cfg.workers, || render_views(&scene, &cfg.cameras(), cfg.precision)).map_err(runtime_failure)?;
    let save = |img: &Image, name: String| -> Result<(), Failure> {
        save_png(img, &args.out.join(name), BitDepth::Eight).map_err(|e: PngError| runtime_failure(e))
    };
    for (k, (out, _)) in views.iter().enumerate() {
        let suffix = if k == 0 { String::new() } else { format!("_{k}") };
        save(&out.color, format!("color{suffix}.png"))?;
        save(&out.alpha, format!("alpha{suffix}.png"))?;
        let depth = depth_image(&out.frame.depth, &out.frame.coverage_mask(), scene.width, scene.height);
        save(&depth, format!("depth{suffix}.png"))?;
    }
    eprintln!("wrote {} view(s) to {}", views.len(), args.out.display());
    Ok(())
}

fn optimize(args: &OptimizeArgs) -> Result<(), Failure> {
    let (mut cfg, base) = load_config(&args.common)?;
    let task = cfg
        .task
        .as_mut()
        .ok_or_else(|| config_failure("config has no task section; `optimize` needs one"))?;
    if let Some(n) = args.iters {
        task.iterations = n;
    }
    prepare_output(&cfg, &args.common)?;
    let report = with_workers(cfg.workers, || run_task(&cfg, &base, Some(&args.common.out))).map_err(task_failure)?;
    eprint!("{}", report.summary());
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let (cfg, base) = load_config(&args.common)?;
    if cfg.precision != Precision::Double {
        return Err(config_failure("gradcheck runs in double precision only"));
    }
    prepare_output(&cfg, &args.common)?;
    let problem_failure = |e: ProblemError| match e {
        ProblemError::Config(c) => config_failure(c),
        ProblemError::Render(r) => runtime_failure(r),
    };
    let (scene, _, _) = perturbed_problem(&cfg, &base, cfg.seed).map_err(problem_failure)?;
    let groups: Vec<ParamGroup> = if args.groups.is_empty() {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| ParamSet::new([g]).is_ok_and(|p| p.check_scene(&scene).is_ok()))
            .collect()
    } else {
        for &g in &args.groups {
            ParamSet::new([g])
                .and_then(|p| p.check_scene(&scene))
                .map_err(|e: diffrast_core::optim::OptimError| config_failure(e))?;
        }
        args.groups.clone()
    };
    let opts = GradcheckOptions {
        samples: args.samples,
        h: args.step,
        tolerance: args.tolerance,
        seed: cfg.seed,
        ..Default::default()
    };
    let reports = with_workers(cfg.workers, || {
        groups
            .iter()
            .map(|&g| gradcheck_config(&cfg, &base, g, &opts, args.points))
            .collect::<Result<Vec<_>, _>>()
    })
    .map_err(problem_failure)?;
    let table: String = reports.iter().map(|r| format!("{r}\n")).collect();
    print!("{table}");
    let path = args.common.out.join("gradcheck.txt");
    std::fs::write(&path, &table).map_err(|e| runtime_failure(format!("{}: {e}", path.display())))?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.ok()).map(|r| r.group.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Render(a) => render(a),
        Command::Optimize(a) => optimize(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
