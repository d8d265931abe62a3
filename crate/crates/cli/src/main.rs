mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use marsnav_core::dataset::{build_dataset, Dataset, GoalMode, Split, Task};
use marsnav_core::diagnostics::{run_suite, SuiteOptions, DEFAULT_TOLERANCE};
use marsnav_core::eval::{evaluate, rollout, EvalReport, OraclePolicy, Policy, StartMode};
use marsnav_core::models::{load_checkpoint, save_checkpoint, Arch};
use marsnav_core::render::{render_trajectory_overlay, render_value_map, value_map};
use marsnav_core::train::{train, TrainConfig};

use config::{GenConfig, RunConfig};

#[derive(Parser)]
#[command(name = "marsnav", version, about = "Crater-terrain navigation: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic terrain corpus with expert trajectories.
    GenData(GenArgs),
    /// Train a policy network on a corpus.
    Train(TrainArgs),
    /// Report step accuracy and success rates of a checkpoint.
    Eval(EvalArgs),
    /// Time one training epoch of dbnet against vin.
    Bench(BenchArgs),
    /// Finite-difference gradient checks of every layer and architecture.
    Gradcheck(GradArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GoalModeArg {
    PerMap,
    PerTrajectory,
}

impl From<GoalModeArg> for GoalMode {
    fn from(g: GoalModeArg) -> Self {
        match g {
            GoalModeArg::PerMap => GoalMode::PerMap,
            GoalModeArg::PerTrajectory => GoalMode::PerTrajectory,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    maps: Option<usize>,
    #[arg(long)]
    traj: Option<usize>,
    /// Input raster edge M.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    goal_mode: Option<GoalModeArg>,
    /// M=128 and 10000 maps.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Value-iteration recurrences for vin.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Skip the closing success-rate rollouts.
    #[arg(long)]
    no_success_eval: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the expert planner itself.
    #[arg(long)]
    oracle: bool,
    /// Expected architecture of the checkpoint.
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Directory for eval.json and rendered images.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    render_trajectories: usize,
    #[arg(long, default_value_t = 0)]
    render_values: usize,
    /// Upscale factor for value maps.
    #[arg(long, default_value_t = 1)]
    upscale: usize,
    /// Roll out from this many fresh random starts per task instead of the stored ones.
    #[arg(long)]
    random_starts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 40)]
    k: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the report here as JSON as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// Negative control: corrupt the convolution weight gradient.
    #[arg(long)]
    inject_bug: bool,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: GenArgs) -> Result<()> {
    let mut cfg = GenConfig::load(args.config.as_deref())?;
    if args.paper_scale {
        cfg.paper_scale();
    }
    cfg.maps = args.maps.unwrap_or(cfg.maps);
    cfg.traj = args.traj.unwrap_or(cfg.traj);
    cfg.size = args.size.unwrap_or(cfg.size);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    if let Some(g) = args.goal_mode {
        cfg.goal_mode = g.into();
    }
    let dc = cfg.resolve();
    dc.validate()?;
    let dataset = build_dataset(&dc)?;
    dataset.save(&args.out)?;
    write_json(&args.out.join("config.json"), &cfg.with_terrain(dc.terrain.clone()))?;
    println!("{}", serde_json::to_string(&dataset.manifest.counts)?);
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(d) = args.data {
        cfg.data = Some(d);
    }
    let t = &mut cfg.train;
    t.arch = args.arch.unwrap_or(t.arch);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.lr = args.lr.unwrap_or(t.lr);
    t.lambda = args.lambda.unwrap_or(t.lambda);
    t.batch_size = args.batch.unwrap_or(t.batch_size);
    t.seed = args.seed.unwrap_or(t.seed);
    t.deterministic |= args.deterministic;
    t.vin_iterations = args.k.unwrap_or(t.vin_iterations);
    t.workers = args.workers.unwrap_or(t.workers);
    t.success_eval &= !args.no_success_eval;
    t.validate()?;
    let data = cfg.data.clone().context("no dataset given (--data or config)")?;
    let dataset = Dataset::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let (tr, te) = (dataset.tasks(Split::Train)?, dataset.tasks(Split::Test)?);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let outcome = train(&cfg.train, &tr, &te)?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &outcome.best, outcome.best_step)?;
    write_json(&args.out.join("metrics.json"), &outcome.metrics)?;
    write_json(&args.out.join("timing.json"), &outcome.timing)?;
    let m = &outcome.metrics;
    println!(
        "{} best epoch {} test_acc {:.4} train_succ {} test_succ {}",
        m.arch,
        m.best_epoch,
        m.best_test_acc,
        fmt_opt(m.train_succ),
        fmt_opt(m.test_succ)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    Ok(pool.install(f))
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let policy: Box<dyn Policy> = match &args.checkpoint {
        Some(path) => {
            let (header, net) = load_checkpoint(path)?;
            if let Some(a) = args.arch {
                if a != header.spec.arch {
                    bail!("checkpoint holds {} but --arch {a} was requested", header.spec.arch);
                }
            }
            if header.spec.input_size != dataset.image_size() {
                bail!(
                    "checkpoint expects {}-pixel inputs but the dataset has {}",
                    header.spec.input_size,
                    dataset.image_size()
                );
            }
            Box::new(net)
        }
        None => Box::new(OraclePolicy),
    };
    let mode = match args.random_starts {
        Some(per_task) => StartMode::Random { per_task, seed: args.seed },
        None => StartMode::Stored,
    };
    let (tr, te) = (dataset.tasks(Split::Train)?, dataset.tasks(Split::Test)?);
    let report: EvalReport = with_workers(args.workers, || evaluate(policy.as_ref(), &tr, &te, mode))??;
    println!("{}", serde_json::to_string(&report)?);
    if args.render_trajectories + args.render_values > 0 || args.out.is_some() {
        let out = match &args.out {
            Some(o) => o.clone(),
            None => args.checkpoint.as_deref().and_then(Path::parent).map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("eval.json"), &report)?;
        let l = dataset.manifest.terrain.cell_size;
        if args.render_trajectories > 0 {
            let dir = out.join("trajectories");
            fs::create_dir_all(&dir)?;
            let picks = te.iter().chain(&tr).flat_map(|t| t.starts.iter().map(move |&s| (t, s)));
            let mut written = 0;
            for (i, (task, start)) in picks.take(args.render_trajectories).enumerate() {
                let r = rollout(policy.as_ref(), task, start, task.world.max_steps())?;
                let img = render_trajectory_overlay(&dataset.maps[task.map_index].gray, l, &r.positions, task.world.goal())?;
                let p = dir.join(format!("traj_{i:03}.png"));
                img.save(&p).with_context(|| format!("writing {}", p.display()))?;
                written += 1;
            }
            if written < args.render_trajectories {
                log::warn!("only {written} trajectories available to render");
            }
        }
        if args.render_values > 0 {
            let dir = out.join("values");
            fs::create_dir_all(&dir)?;
            let picks: Vec<&Task> = te.iter().chain(&tr).take(args.render_values).collect();
            if picks.len() < args.render_values {
                log::warn!("only {} tasks available for value maps", picks.len());
            }
            for (i, task) in picks.into_iter().enumerate() {
                let v = value_map(policy.as_ref(), task)?;
                let img = render_value_map(&v, task.world.size(), args.upscale)?;
                let p = dir.join(format!("value_{i:03}.png"));
                img.save(&p).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    batch_size: usize,
    vin_iterations: usize,
    train_samples: usize,
    dbnet_seconds: f64,
    vin_seconds: f64,
    /// dbnet time over vin time.
    ratio: f64,
    /// Fractional time saved by dbnet relative to vin.
    reduction: f64,
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let (tr, te) = (dataset.tasks(Split::Train)?, dataset.tasks(Split::Test)?);
    let epoch = |arch: Arch| -> Result<f64> {
        let mut c = TrainConfig::new(arch);
        c.epochs = 1;
        c.batch_size = args.batch;
        c.seed = args.seed;
        c.vin_iterations = args.k;
        c.workers = args.workers;
        c.success_eval = false;
        Ok(train(&c, &tr, &te)?.timing.epoch_seconds[0])
    };
    let dbnet_seconds = epoch(Arch::DbNet)?;
    let vin_seconds = epoch(Arch::Vin)?;
    let ratio = dbnet_seconds / vin_seconds;
    let report = BenchReport {
        batch_size: args.batch,
        vin_iterations: args.k,
        train_samples: tr.iter().map(|t| t.samples.len()).sum(),
        dbnet_seconds,
        vin_seconds,
        ratio,
        reduction: 1.0 - ratio,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: GradArgs) -> Result<bool> {
    let opts = SuiteOptions {
        tolerance: args.tolerance,
        seed: args.seed,
        inject_bug: args.inject_bug,
        ..SuiteOptions::default()
    };
    let reports = run_suite(&opts)?;
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        write!(stdout, "{r}")?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    writeln!(stdout, "{} checks, {failed} failed", reports.len())?;
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Bench(a) => bench_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
