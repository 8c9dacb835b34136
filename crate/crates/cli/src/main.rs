use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepc_core::deepc::assemble_parametric_qp;
use deepc_core::hankel::{pe_order, split_past_future};
use deepc_core::harness::sweep::tuning_repetitions;
use deepc_core::harness::{
    generate_dataset, monte_carlo, prepare_data, prepare_from_trajectories, repetition_seed, run_closed_loop,
    sweep_parameter, tuned_comparison, ExperimentConfig, Variant,
};
use deepc_core::linalg::{condition_number, numerical_rank};
use deepc_core::lti_sim::{LtiModel, Trajectory};
use deepc_core::Error;
use serde::Serialize;
use serde_json::json;

const RANK_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "deepc", version, about = "DeePC experiments with averaged data and a data-driven EKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Controller variant override.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the offline data trajectories of one repetition.
    GenData {
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Average a generated dataset into Hankel blocks.
    Average {
        /// Directory written by `gen-data` (defaults to `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One closed-loop run.
    Run {
        #[arg(long, default_value_t = 0)]
        rep: usize,
        /// Use the trajectories of a `gen-data` directory instead of simulating them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tune and evaluate over the configured sweep, or tune the selected variant alone.
    Sweep,
    /// Monte-Carlo statistics of the model-based MPC.
    Baseline,
    /// Excitation, rank and conditioning report for a dataset.
    Check {
        /// Directory written by `gen-data`; simulated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_) | Error::Parse(_) | Error::InvalidArgument(_) | Error::Dimension { .. }) => 2,
            CliError::Core(Error::Infeasible(_)) => 3,
            CliError::Core(Error::Io(_)) | CliError::Io { .. } => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(io_err(path))?;
    Ok(())
}

struct Context {
    cfg: ExperimentConfig,
    model: LtiModel,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(v) = common.variant {
            cfg.variant = v;
        }
        cfg.validate()?;
        let model = cfg.build_model()?;
        fs::create_dir_all(&common.out).map_err(io_err(&common.out))?;
        // The effective configuration travels with every result.
        let cfg_path = common.out.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml_string()?).map_err(io_err(&cfg_path))?;
        Ok(Self {
            cfg,
            model,
            out: common.out.clone(),
        })
    }
}

#[derive(Serialize, serde::Deserialize)]
struct Manifest {
    master_seed: u64,
    repetition: usize,
    run_seed: u64,
    t: usize,
    pe_amplitude: f64,
    sigma_w2: f64,
    sigma_v2: f64,
    files: Vec<String>,
}

fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Trajectory>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let trajectories = manifest
        .files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let file = File::open(&path).map_err(io_err(&path))?;
            Ok(Trajectory::read_csv(BufReader::new(file))?)
        })
        .collect::<Result<Vec<_>>>()?;
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no trajectories", path.display())).into());
    }
    Ok((manifest, trajectories))
}

fn gen_data(ctx: &Context, rep: usize) -> Result<()> {
    let run_seed = repetition_seed(ctx.cfg.seed, rep);
    let trajectories = generate_dataset(&ctx.cfg, &ctx.model, run_seed)?;
    let dir = ctx.out.join("data");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut files = Vec::with_capacity(trajectories.len());
    for (i, t) in trajectories.iter().enumerate() {
        let name = format!("trajectory_{i:03}.csv");
        let path = dir.join(&name);
        t.write_csv(create(&path)?)?;
        files.push(name);
    }
    let manifest = Manifest {
        master_seed: ctx.cfg.seed,
        repetition: rep,
        run_seed,
        t: ctx.cfg.t,
        pe_amplitude: ctx.cfg.pe_amplitude,
        sigma_w2: ctx.cfg.noise.sigma_w2,
        sigma_v2: ctx.cfg.noise.sigma_v2,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {} trajectories to {}", trajectories.len(), dir.display());
    Ok(())
}

fn average(ctx: &Context, data: Option<PathBuf>) -> Result<()> {
    let dir = data.unwrap_or_else(|| ctx.out.join("data"));
    let (manifest, trajectories) = load_dataset(&dir)?;
    let prepared = prepare_from_trajectories(&trajectories, ctx.cfg.controller.np, ctx.cfg.controller.nf)?;
    let path = ctx.out.join("averaged_blocks.csv");
    prepared.averaged.write_csv(create(&path)?)?;
    write_json(
        &ctx.out.join("average.json"),
        &json!({
            "master_seed": manifest.master_seed,
            "run_seed": manifest.run_seed,
            "trajectories": trajectories.len(),
            "columns": prepared.averaged.cols(),
            "np": ctx.cfg.controller.np,
            "nf": ctx.cfg.controller.nf,
        }),
    )?;
    println!("averaged {} trajectories into {}", trajectories.len(), path.display());
    Ok(())
}

fn run(ctx: &Context, rep: usize, data: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let variant = cfg.variant;
    let (run_seed, prepared) = match data {
        Some(dir) => {
            let (manifest, trajectories) = load_dataset(&dir)?;
            let prepared = prepare_from_trajectories(&trajectories, cfg.controller.np, cfg.controller.nf)?;
            (manifest.run_seed, Some(prepared))
        }
        None => {
            let run_seed = repetition_seed(cfg.seed, rep);
            let prepared = if variant.is_data_driven() {
                Some(prepare_data(cfg, &ctx.model, run_seed)?)
            } else {
                None
            };
            (run_seed, prepared)
        }
    };
    let lambda = (cfg.controller.lambda_y, cfg.controller.lambda_g);
    let result = run_closed_loop(cfg, &ctx.model, variant, prepared.as_ref(), lambda, run_seed)?;
    result.write_csv(create(&ctx.out.join("run.csv"))?)?;
    write_json(
        &ctx.out.join("summary.json"),
        &json!({
            "variant": variant,
            "master_seed": cfg.seed,
            "repetition": rep,
            "run_seed": run_seed,
            "lambda_y": lambda.0,
            "lambda_g": lambda.1,
            "cost": result.cost,
            "relaxed_steps": result.relaxed_steps,
            "law_fallbacks": result.law_fallbacks,
        }),
    )?;
    println!("{variant}: J = {:.6} (seed {run_seed})", result.cost);
    Ok(())
}

fn sweep(ctx: &Context, variant_override: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    match &cfg.sweep {
        Some(spec) => {
            let variants = if variant_override { vec![cfg.variant] } else { spec.variants.clone() };
            let report = sweep_parameter(cfg, &ctx.model, spec.parameter, &spec.values, &variants, spec.retune)?;
            report.write_curves_csv(create(&ctx.out.join("curves.csv"))?)?;
            write_json(
                &ctx.out.join("summary.json"),
                &json!({
                    "master_seed": cfg.seed,
                    "tuning_repetitions": tuning_repetitions(cfg),
                    "report": report,
                }),
            )?;
            for point in &report.points {
                for s in &point.report.variants {
                    println!(
                        "{}={} {}: J = {:.4} (failed {}/{}, λ = ({:e}, {:e}))",
                        spec.parameter.name(),
                        point.value,
                        s.variant,
                        s.summary.map_or(f64::NAN, |m| m.mean),
                        s.failed,
                        s.runs,
                        s.lambda_y,
                        s.lambda_g
                    );
                }
            }
        }
        None => {
            let (tuning, report) = tuned_comparison(cfg, &ctx.model, &[cfg.variant], true);
            for t in &tuning {
                t.write_csv(create(&ctx.out.join(format!("lambda_{}.csv", t.variant.name().replace('+', "_"))))?)?;
            }
            write_json(
                &ctx.out.join("summary.json"),
                &json!({
                    "master_seed": cfg.seed,
                    "tuning_repetitions": tuning_repetitions(cfg),
                    "tuning": tuning,
                    "report": report,
                }),
            )?;
            for s in &report.variants {
                println!(
                    "{}: J = {:.4} (failed {}/{}, λ = ({:e}, {:e}))",
                    s.variant,
                    s.summary.map_or(f64::NAN, |m| m.mean),
                    s.failed,
                    s.runs,
                    s.lambda_y,
                    s.lambda_g
                );
            }
        }
    }
    Ok(())
}

fn baseline(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let report = monte_carlo(cfg, &ctx.model, &[(Variant::MpcOracle, (0.0, 0.0))], cfg.repetitions);
    let stats = &report.variants[0];
    let path = ctx.out.join("baseline.csv");
    let mut w = create(&path)?;
    writeln!(w, "rep,seed,cost").map_err(io_err(&path))?;
    for (i, (seed, cost)) in report.seeds.iter().zip(&stats.costs).enumerate() {
        let cost = cost.map_or("nan".to_string(), |c| format!("{c:e}"));
        writeln!(w, "{i},{seed},{cost}").map_err(io_err(&path))?;
    }
    write_json(&ctx.out.join("summary.json"), &report)?;
    println!(
        "mpc-oracle: J = {:.4} ± {:.4} over {} runs ({} failed)",
        stats.summary.map_or(f64::NAN, |s| s.mean),
        stats.summary.map_or(f64::NAN, |s| s.std),
        stats.runs,
        stats.failed
    );
    Ok(())
}

fn check(ctx: &Context, data: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (np, nf) = (cfg.controller.np, cfg.controller.nf);
    let trajectories = match data {
        Some(dir) => load_dataset(&dir)?.1,
        None => generate_dataset(cfg, &ctx.model, repetition_seed(cfg.seed, 0))?,
    };
    let first = &trajectories[0];
    let (n, m) = (ctx.model.n(), ctx.model.m());
    let t = first.len();
    let required_order = np + nf + n;
    let order = pe_order(&first.inputs, RANK_TOL);
    let min_t = cfg.min_data_length(&ctx.model);
    let mut report = json!({
        "trajectories": trajectories.len(),
        "t": t,
        "min_t": min_t,
        "t_bound_ok": t >= min_t,
        "required_pe_order": required_order,
        "pe_order": order,
        "pe_ok": order >= required_order,
    });
    println!("trajectories: {}, length T = {t}", trajectories.len());
    if t < min_t {
        println!("warning: T = {t} is below the minimum (m+1)(Np+Nf+n)+1 = {min_t}");
    }
    println!(
        "input excitation: order {order}, required Np+Nf+n = {required_order} -> {}",
        if order >= required_order { "ok" } else { "FAIL" }
    );
    match split_past_future(&first.inputs, &first.outputs, np, nf) {
        Ok(blocks) => {
            let h = blocks.stacked();
            let rank = numerical_rank(&h, RANK_TOL);
            let noise_free_rank = m * (np + nf) + n;
            println!(
                "data matrix: {}x{}, numerical rank {rank} (noise-free rank would be {noise_free_rank})",
                h.nrows(),
                h.ncols()
            );
            report["hankel_rows"] = json!(h.nrows());
            report["hankel_cols"] = json!(h.ncols());
            report["hankel_rank"] = json!(rank);
            let controller = cfg.build_controller(&ctx.model)?;
            let prepared = prepare_from_trajectories(&trajectories, np, nf)?;
            for (label, blocks) in [("single", &prepared.single), ("averaged", &prepared.averaged)] {
                let cond = assemble_parametric_qp(blocks, &controller).map(|q| condition_number(&q.p))?;
                println!("cost matrix conditioning ({label} data): {cond:.3e}");
                report[format!("p_condition_{label}")] = json!(cond);
            }
        }
        Err(e) => {
            println!("data matrix: unavailable ({e})");
            report["hankel_error"] = json!(e.to_string());
        }
    }
    write_json(&ctx.out.join("check.json"), &report)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match cli.command {
        Command::GenData { rep } => gen_data(&ctx, rep),
        Command::Average { data } => average(&ctx, data),
        Command::Run { rep, data } => run(&ctx, rep, data),
        Command::Sweep => sweep(&ctx, cli.common.variant.is_some()),
        Command::Baseline => baseline(&ctx),
        Command::Check { data } => check(&ctx, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
