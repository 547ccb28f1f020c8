//! Command-line driver: generate Plummer initial conditions, run
//! simulations on a chosen force backend, verify accelerations against the
//! O(N²) direct sum, and sweep workers × grain emitting benchmark CSV.
//!
//! Exit codes: 0 success, 1 usage, 2 parse/I/O or numerical data problem,
//! 3 verification failure, 4 engine deadlock.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use nbody_core::dataflow::{
    execute_force_stage, flatten, wire, Accumulation, DataflowError, GrainConfig,
};
use nbody_core::engine::{Engine, EngineConfig, EngineError};
use nbody_core::icgen::{plummer, read_particles, write_particles, IcError, PlummerConfig};
use nbody_core::octree::{accel_direct, build_with_moments, OctreeError};
use nbody_core::sim::{Backend, IterationTiming, SimConfig, SimError, Simulation};
use nbody_core::{ForceParams, Particle, Theta};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DEADLOCK: u8 = 4;

const CSV_HEADER: &str = "backend,n,theta,grain,workers,iteration,tree_time_s,force_time_s,\
                          total_time_s,tasks_spawned,suspensions,mean_list_len";

#[derive(Parser)]
#[command(
    name = "nbody",
    version,
    about = "Barnes-Hut N-body simulator on an event-driven dataflow engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Plummer-model initial conditions.
    Gen(GenArgs),
    /// Run a simulation, emitting per-iteration timing CSV.
    Run(RunArgs),
    /// Compare dataflow accelerations against the O(N²) direct sum.
    Verify(VerifyArgs),
    /// Sweep workers × grain and emit a benchmark CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Particle count (must be at least 1).
    #[arg(long)]
    n: usize,
    /// RNG seed; the same seed always yields the same file.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output particle file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Dataflow,
    Static,
    Serial,
}

impl BackendArg {
    fn backend(self) -> Backend {
        match self {
            BackendArg::Dataflow => Backend::Dataflow,
            BackendArg::Static => Backend::StaticChunk,
            BackendArg::Serial => Backend::Serial,
        }
    }

    fn label(self) -> &'static str {
        match self {
            BackendArg::Dataflow => "dataflow",
            BackendArg::Static => "static",
            BackendArg::Serial => "serial",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AccumArg {
    /// Deterministic: per-element when-all join, dependency order.
    Det,
    /// Streaming: per-dependency gets, arrival order.
    Stream,
}

impl AccumArg {
    fn accumulation(self) -> Accumulation {
        match self {
            AccumArg::Det => Accumulation::Deterministic,
            AccumArg::Stream => Accumulation::Streaming,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Input particle file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendArg::Dataflow)]
    backend: BackendArg,
    /// Opening angle θ of the acceptance criterion (0 = exact).
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Output-row elements per management task (dataflow backend only).
    #[arg(long, default_value_t = 64)]
    grain: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Time step in model units.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Softening length ε.
    #[arg(long, default_value_t = 1e-2)]
    softening: f64,
    /// Accumulation mode (dataflow backend only).
    #[arg(long, value_enum, default_value_t = AccumArg::Det)]
    accum: AccumArg,
    /// Timing CSV path; stdout if omitted.
    #[arg(long)]
    timings_out: Option<PathBuf>,
    /// Final particle state path; not written if omitted.
    #[arg(long)]
    state_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Input particle file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Number of particles compared against the direct sum (evenly
    /// spaced); must not exceed N.
    #[arg(long, default_value_t = 500)]
    sample: usize,
    /// Median relative-error bound for θ > 0.
    #[arg(long, default_value_t = 1e-2)]
    bound: f64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 64)]
    grain: usize,
    /// Softening length ε.
    #[arg(long, default_value_t = 1e-2)]
    softening: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Input particle file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Worker counts to sweep (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers_list: Vec<usize>,
    /// Dataflow grain sizes to sweep (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
    grain_list: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Iterations per configuration (iteration 0 is warm-up; it stays in
    /// the CSV, flagged by its index).
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Softening length ε.
    #[arg(long, default_value_t = 1e-2)]
    softening: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Ic(#[from] IcError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataflow(#[from] DataflowError),
    #[error(transparent)]
    Tree(#[from] OctreeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

fn is_deadlock(err: &CliError) -> bool {
    let engine_err = match err {
        CliError::Engine(e) => Some(e),
        CliError::Dataflow(DataflowError::Engine(e)) => Some(e),
        CliError::Sim(SimError::Engine(e)) => Some(e),
        CliError::Sim(SimError::Stage(DataflowError::Engine(e))) => Some(e),
        _ => None,
    };
    matches!(engine_err, Some(EngineError::Deadlock { .. }))
}

fn exit_code(err: &CliError) -> u8 {
    if is_deadlock(err) {
        return EXIT_DEADLOCK;
    }
    match err {
        CliError::Usage(_) => EXIT_USAGE,
        CliError::Verification(_) => EXIT_VERIFY,
        CliError::Ic(IcError::ZeroParticles) => EXIT_USAGE,
        CliError::Sim(
            SimError::NoParticles
            | SimError::NoSteps
            | SimError::BadTimeStep(_)
            | SimError::NoWorkers
            | SimError::WrongCount { .. },
        ) => EXIT_USAGE,
        CliError::Dataflow(DataflowError::InvalidGrain | DataflowError::InvalidCount) => {
            EXIT_USAGE
        }
        CliError::Tree(
            OctreeError::InvalidTheta { .. } | OctreeError::InvalidParams { .. },
        ) => EXIT_USAGE,
        CliError::Engine(EngineError::ZeroWorkers) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let config = PlummerConfig { n: args.n, seed: args.seed, ..PlummerConfig::default() };
    let particles = plummer(&config)?;
    write_particles(&particles, &args.out)?;
    println!("wrote {} particles to {}", particles.len(), args.out.display());
    Ok(())
}

/// One CSV row per iteration. `grain` is 0 for backends without a grain
/// axis.
fn csv_rows(
    out: &mut String,
    backend: &str,
    n: usize,
    theta: f64,
    grain: usize,
    workers: usize,
    timings: &[IterationTiming],
) {
    for t in timings {
        writeln!(
            out,
            "{backend},{n},{theta},{grain},{workers},{iter},{tree:.9},{force:.9},{total:.9},\
             {spawned},{susp},{mean:.6}",
            iter = t.iteration,
            tree = t.tree_time,
            force = t.force_time,
            total = t.total_time,
            spawned = t.tasks_spawned,
            susp = t.suspensions,
            mean = t.mean_list_len,
        )
        .expect("writing to a String cannot fail");
    }
}

/// Runs `steps` iterations plus the finalization kick, returning timings,
/// the final state, and (for the dataflow backend) cumulative engine
/// counters.
fn drive(
    particles: Vec<Particle>,
    config: &SimConfig,
) -> Result<(nbody_core::sim::SimState, Vec<IterationTiming>, Option<String>), CliError> {
    let mut sim = Simulation::new(config.clone(), particles)?;
    let mut timings = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        timings.push(sim.step()?);
    }
    sim.finalize()?;
    let engine_kv = sim.engine_stats().map(|s| s.to_kv());
    Ok((sim.into_state(), timings, engine_kv))
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let particles = read_particles(&args.input)?;
    let config = SimConfig {
        n: particles.len(),
        theta: Theta::new(args.theta)?,
        dt: args.dt,
        steps: args.steps,
        params: ForceParams { g_const: 1.0, softening: args.softening },
        grain: GrainConfig::fixed_grain(args.grain)
            .with_accumulation(args.accum.accumulation()),
        workers: args.workers,
        backend: args.backend.backend(),
        seed: 0,
    };
    let (state, timings, engine_kv) = drive(particles, &config)?;

    let grain_column = match args.backend {
        BackendArg::Dataflow => args.grain,
        BackendArg::Static | BackendArg::Serial => 0,
    };
    let workers_column = match args.backend {
        BackendArg::Serial => 1,
        _ => args.workers,
    };
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    csv_rows(
        &mut csv,
        args.backend.label(),
        config.n,
        args.theta,
        grain_column,
        workers_column,
        &timings,
    );
    match &args.timings_out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &args.state_out {
        write_particles(&state.particles, path)?;
    }
    if let Some(kv) = engine_kv {
        eprint!("{kv}");
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let particles = read_particles(&args.input)?;
    let n = particles.len();
    if args.sample == 0 || args.sample > n {
        return Err(CliError::Usage(format!(
            "--sample must be between 1 and the particle count ({n}), got {}",
            args.sample
        )));
    }
    let theta = Theta::new(args.theta)?;
    let params = ForceParams { g_const: 1.0, softening: args.softening };
    params.validate()?;

    let tree = build_with_moments(&particles)?;
    let engine = Engine::new(EngineConfig::new(args.workers))?;
    let (row, _) = flatten(&tree, &engine);
    let outputs = wire(&row, &tree, &particles, theta, &engine);
    let (accels, _) = execute_force_stage(
        &row,
        outputs,
        &particles,
        GrainConfig::fixed_grain(args.grain),
        params,
        &engine,
    )?;

    let mut errors = Vec::with_capacity(args.sample);
    for k in 0..args.sample {
        let i = k * n / args.sample;
        let exact = accel_direct(&particles, i, &params)?;
        let diff = (accels[i] - exact).norm();
        errors.push(if diff == 0.0 { 0.0 } else { diff / exact.norm() });
    }
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let max = *errors.last().expect("sample is nonempty");
    let median = errors[errors.len() / 2];
    println!(
        "verify: n={n} theta={} sampled={} max_rel_err={max:.3e} median_rel_err={median:.3e}",
        args.theta, args.sample
    );

    let ok = if args.theta == 0.0 { max == 0.0 } else { median < args.bound };
    if ok {
        Ok(())
    } else if args.theta == 0.0 {
        Err(CliError::Verification(format!(
            "theta=0 must match the direct sum bitwise; max relative error {max:.3e}"
        )))
    } else {
        Err(CliError::Verification(format!(
            "median relative error {median:.3e} exceeds bound {:.3e}",
            args.bound
        )))
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.workers_list.is_empty() {
        return Err(CliError::Usage("--workers-list must not be empty".into()));
    }
    if args.grain_list.is_empty() {
        return Err(CliError::Usage("--grain-list must not be empty".into()));
    }
    let particles = read_particles(&args.input)?;
    let n = particles.len();
    let theta = Theta::new(args.theta)?;
    let params = ForceParams { g_const: 1.0, softening: args.softening };

    let base = SimConfig {
        n,
        theta,
        dt: args.dt,
        steps: args.steps,
        params,
        grain: GrainConfig::fixed_grain(64),
        workers: 1,
        backend: Backend::Serial,
        seed: 0,
    };

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');

    // Serial baseline: no sweep axes, one configuration.
    let (_, timings, _) = drive(particles.clone(), &base)?;
    csv_rows(&mut csv, "serial", n, args.theta, 0, 1, &timings);

    // Static chunking: workers axis only.
    for &workers in &args.workers_list {
        let mut config = base.clone();
        config.backend = Backend::StaticChunk;
        config.workers = workers;
        let (_, timings, _) = drive(particles.clone(), &config)?;
        csv_rows(&mut csv, "static", n, args.theta, 0, workers, &timings);
    }

    // Dataflow: full workers × grain sweep, tracking the best grain per
    // worker count by mean force time (warm-up iteration 0 excluded when
    // more than one iteration ran).
    let mut best: Vec<(usize, usize, f64)> = Vec::new();
    for &workers in &args.workers_list {
        let mut best_for_w: Option<(usize, f64)> = None;
        for &grain in &args.grain_list {
            let mut config = base.clone();
            config.backend = Backend::Dataflow;
            config.workers = workers;
            config.grain = GrainConfig::fixed_grain(grain);
            let (_, timings, _) = drive(particles.clone(), &config)?;
            csv_rows(&mut csv, "dataflow", n, args.theta, grain, workers, &timings);

            let measured: Vec<f64> = if timings.len() > 1 {
                timings[1..].iter().map(|t| t.force_time).collect()
            } else {
                timings.iter().map(|t| t.force_time).collect()
            };
            let mean = measured.iter().sum::<f64>() / measured.len() as f64;
            if best_for_w.is_none_or(|(_, t)| mean < t) {
                best_for_w = Some((grain, mean));
            }
        }
        let (grain, mean) = best_for_w.expect("grain list is nonempty");
        best.push((workers, grain, mean));
    }

    write_text(&args.out, &csv)?;
    println!("wrote {} to {}", pluralize_rows(&csv), args.out.display());
    println!("best grain per worker count:");
    for (workers, grain, mean) in best {
        println!("  workers={workers} grain={grain} mean_force_s={mean:.6}");
    }
    Ok(())
}

fn pluralize_rows(csv: &str) -> String {
    let rows = csv.lines().count().saturating_sub(1);
    format!("{rows} rows")
}
