//! Command-line driver for the particle samplers and experiments.
//!
//! Subcommands:
//!
//! * `sample --method {eki|eks|nanbu|bird} --config <file> --out <dir>` —
//!   run one sampler job and write snapshots, summary metrics, and a
//!   manifest.
//! * `experiment --name {kalman-rate|coupling|boltzmann-figures} --config
//!   <file> --out <dir>` — run a harness experiment and write its result
//!   bundle (CSV tables, SVG plots, manifest).
//! * `baseline --target <potential> --n <N> --out <dir>` — emit
//!   inverse-transform reference samples in the simulator snapshot schema
//!   (the time column is fixed at `-1` to mark reference rows).
//! * `validate --config <file>` — check a configuration without running
//!   it (dimensions, positive definiteness, velocity-variance
//!   feasibility).
//!
//! Exit codes: `0` success, `1` runtime failure (divergence, event-budget
//! exhaustion, I/O), `2` invalid configuration or usage (with a
//! line-positioned message for JSON syntax errors).
//!
//! The run seed resolves in precedence order: `--seed` flag, then the
//! `seed` field of the configuration file, then the `PSAMPLE_SEED`
//! environment variable, then `0`. `--threads` bounds the worker pool;
//! `--threads 1` runs serially and produces bit-identical output to the
//! parallel path.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use psample_core::boltzmann::{run_boltzmann, BoltzmannRun, EventRecord, PhaseEnsemble};
use psample_core::config::{BuiltJob, RunSpec};
use psample_core::harness::{
    experiment_boltzmann_figures, experiment_coupling, experiment_kalman_rate,
    write_coupling_bundle, write_figures_bundle, write_rate_bundle,
};
use psample_core::kalman::{run_kalman, KalmanRun};
use psample_core::metrics::{mollified_kl_phase, mollified_kl_positions};
use psample_core::model::{potential_by_name, Potential};
use psample_core::oracles::equilibrium_sample;
use psample_core::output::{Cell, Manifest, Table};
use psample_core::rng::{RngStream, StreamPurpose};
use psample_core::Error;

/// Environment variable consulted for the seed when neither `--seed` nor
/// the configuration file provides one.
const SEED_ENV_VAR: &str = "PSAMPLE_SEED";

#[derive(Parser)]
#[command(
    name = "psample",
    version,
    about = "Interacting-particle samplers: ensemble Kalman methods and \
             event-driven kinetic simulators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed override (highest precedence, above the config file and the
    /// PSAMPLE_SEED environment variable).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all available cores). `--threads 1` runs
    /// serially with output bit-identical to the parallel path.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sampler and write snapshots and metrics.
    Sample {
        /// Sampler to run: eki, eks, nanbu, or bird. Must match the job
        /// defined in the config file.
        #[arg(long)]
        method: String,
        /// JSON job description.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a harness experiment and write its result bundle.
    Experiment {
        /// Experiment to run: kalman-rate, coupling, or
        /// boltzmann-figures. Must match the job defined in the config.
        #[arg(long)]
        name: String,
        /// JSON job description.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit inverse-transform reference samples for a named potential.
    Baseline {
        /// Potential name (for example quadratic_1d or doublewell_2d).
        #[arg(long)]
        target: String,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a configuration file without running it.
    Validate {
        /// JSON job description.
        #[arg(long)]
        config: PathBuf,
    },
}

/// A classified failure: exit code plus the message printed to stderr.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    /// Invalid configuration or usage (exit 2).
    fn config(message: impl Display) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    /// Runtime failure: divergence, budget exhaustion, I/O (exit 1).
    fn runtime(message: impl Display) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }
}

/// Classify a library error that occurred while *running* a job: anything
/// the config stage should have caught still maps to exit 2, the rest is
/// a runtime failure.
fn classify_run_error(err: Error) -> Failure {
    match err {
        Error::InvalidConfig(_) => Failure::config(err),
        _ => Failure::runtime(err),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("psample: error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Sample {
            method,
            config,
            out,
        } => run_sample(&method, &config, &out, cli.seed),
        Command::Experiment { name, config, out } => {
            run_experiment(&name, &config, &out, cli.seed)
        }
        Command::Baseline { target, n, out } => run_baseline(&target, n, &out, cli.seed),
        Command::Validate { config } => run_validate(&config),
    }
}

/// Install the global worker pool when `--threads` is given.
fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::config("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::runtime(format!("failed to build the worker pool: {e}")))
}

/// Read and parse a configuration file, returning both the typed spec and
/// the raw JSON value (embedded verbatim in manifests).
fn load_spec(path: &Path) -> Result<(RunSpec, serde_json::Value), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let spec = RunSpec::parse(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok((spec, value))
}

/// Resolve the run seed: `--seed` flag, then the config file, then the
/// `PSAMPLE_SEED` environment variable, then `0`.
fn resolve_seed(flag: Option<u64>, config_seed: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = config_seed {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text.trim().parse().map_err(|_| {
            Failure::config(format!(
                "{SEED_ENV_VAR} must be an unsigned 64-bit integer, found {text:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Failure::config(format!("cannot read {SEED_ENV_VAR}: {e}"))),
    }
}

fn run_sample(
    method: &str,
    config_path: &Path,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(), Failure> {
    let wanted = method.to_ascii_lowercase();
    if !matches!(wanted.as_str(), "eki" | "eks" | "nanbu" | "bird") {
        return Err(Failure::config(format!(
            "unknown method {method:?}: expected eki, eks, nanbu, or bird"
        )));
    }
    let (spec, config_value) = load_spec(config_path)?;
    let job = spec.build().map_err(Failure::config)?;
    if job.is_experiment() {
        return Err(Failure::config(format!(
            "{} defines a {} experiment; use the `experiment` subcommand",
            config_path.display(),
            job.dispatch_name()
        )));
    }
    if job.dispatch_name() != wanted {
        return Err(Failure::config(format!(
            "{} defines a {} job, but --method {} was requested",
            config_path.display(),
            job.dispatch_name(),
            wanted
        )));
    }
    let seed = resolve_seed(seed_flag, spec.seed)?;
    let started = Instant::now();
    let mut manifest = Manifest::new(config_value, seed);
    eprintln!("psample: running {wanted} (seed {seed})");

    match job {
        BuiltJob::Kalman {
            method_name,
            problem,
            config,
        } => {
            let run = run_kalman(&problem, &config, seed).map_err(classify_run_error)?;
            eprintln!(
                "psample: {} finished {} steps with {} particles",
                method_name,
                config.n_steps,
                config.n_particles
            );
            manifest.note("method", method_name);
            write_kalman_outputs(&run, out)?;
        }
        BuiltJob::Boltzmann {
            method_name,
            potential,
            init,
            config,
            delta,
        } => {
            let run =
                run_boltzmann(&potential, &init, &config, seed).map_err(classify_run_error)?;
            eprintln!(
                "psample: {} finished at t = {} after {} clock rings ({} collisions)",
                method_name, config.t_final, run.rings, run.collisions
            );
            manifest.note("method", method_name);
            manifest.note("collisions", run.collisions);
            manifest.note("rings", run.rings);
            write_boltzmann_outputs(&run, &potential, delta, out)?;
        }
        _ => unreachable!("experiments were rejected above"),
    }

    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_manifest(&manifest, out)
}

/// Write `records.csv` (per-step summary: step, pseudo-time, mean
/// components, covariance trace) and `snapshots.csv` (retained full
/// ensembles: step, particle_id, coordinates).
fn write_kalman_outputs(run: &KalmanRun, out: &Path) -> Result<(), Failure> {
    let dim = run.final_ensemble.dim();

    let mut columns = vec!["step".to_string(), "time".to_string()];
    columns.extend((1..=dim).map(|k| format!("mean_{k}")));
    columns.push("cov_trace".to_string());
    let mut records = Table::new(columns);
    for rec in &run.records {
        let mut row = vec![Cell::from(rec.step), Cell::from(rec.time)];
        row.extend(rec.mean.iter().map(|&v| Cell::from(v)));
        row.push(Cell::from(rec.cov_trace));
        records.row(row);
    }
    write_table(&records, &out.join("records.csv"))?;

    let mut columns = vec!["step".to_string(), "particle_id".to_string()];
    columns.extend((1..=dim).map(|k| format!("x_{k}")));
    let mut snapshots = Table::new(columns);
    for (step, ensemble) in &run.snapshots {
        let positions = ensemble.positions();
        for particle in 0..ensemble.len() {
            let mut row = vec![Cell::from(*step), Cell::from(particle)];
            row.extend(positions.column(particle).iter().map(|&v| Cell::from(v)));
            snapshots.row(row);
        }
    }
    write_table(&snapshots, &out.join("snapshots.csv"))
}

/// Write `snapshots.csv` (time, particle_id, positions, velocities),
/// long-format `metrics.csv` (time, metric_name, value, run_id), and —
/// when the run kept an event log — `events.csv` (time, kind, owner,
/// accepted).
fn write_boltzmann_outputs(
    run: &BoltzmannRun,
    pot: &Potential,
    delta: f64,
    out: &Path,
) -> Result<(), Failure> {
    let dim = pot.dim();
    let mut columns = vec!["time".to_string(), "particle_id".to_string()];
    columns.extend((1..=dim).map(|k| format!("x_{k}")));
    columns.extend((1..=dim).map(|k| format!("v_{k}")));
    let mut snapshots = Table::new(columns);
    for snap in &run.snapshots {
        append_phase_rows(&mut snapshots, snap, snap.time);
    }
    write_table(&snapshots, &out.join("snapshots.csv"))?;

    let mut metrics = Table::new(["time", "metric_name", "value", "run_id"]);
    for snap in &run.snapshots {
        let kinetic = snap.kinetic_energy();
        let potential = snap.potential_energy(pot).map_err(Failure::runtime)?;
        let kl_x = mollified_kl_positions(&snap.positions, pot, delta).map_err(Failure::runtime)?;
        let kl_phase = mollified_kl_phase(snap, pot, delta).map_err(Failure::runtime)?;
        for (name, value) in [
            ("kinetic_energy", kinetic),
            ("potential_energy", potential),
            ("total_energy", kinetic + potential),
            ("kl_x", kl_x),
            ("kl_phase", kl_phase),
        ] {
            metrics.row([
                Cell::from(snap.time),
                Cell::from(name),
                Cell::from(value),
                Cell::from(0usize),
            ]);
        }
    }
    write_table(&metrics, &out.join("metrics.csv"))?;

    if let Some(events) = &run.events {
        let mut table = Table::new(["time", "kind", "owner", "accepted"]);
        for ev in events {
            let (kind, owner) = describe_event(ev);
            table.row([
                Cell::from(ev.time),
                Cell::from(kind),
                Cell::from(owner),
                Cell::from(u64::from(ev.accepted)),
            ]);
        }
        write_table(&table, &out.join("events.csv"))?;
    }
    Ok(())
}

/// Render an event-log row: pair clocks are owned by an ordered pair,
/// per-particle clocks by a single particle.
fn describe_event(ev: &EventRecord) -> (&'static str, String) {
    match ev.owner {
        (i, Some(j)) => ("pair", format!("{i}:{j}")),
        (i, None) => ("particle", i.to_string()),
    }
}

fn append_phase_rows(table: &mut Table, snap: &PhaseEnsemble, time: f64) {
    let n = snap.positions.ncols();
    for particle in 0..n {
        let mut row = vec![Cell::from(time), Cell::from(particle)];
        row.extend(snap.positions.column(particle).iter().map(|&v| Cell::from(v)));
        row.extend(snap.velocities.column(particle).iter().map(|&v| Cell::from(v)));
        table.row(row);
    }
}

fn run_experiment(
    name: &str,
    config_path: &Path,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(), Failure> {
    let wanted = name.to_ascii_lowercase();
    if !matches!(
        wanted.as_str(),
        "kalman-rate" | "coupling" | "boltzmann-figures"
    ) {
        return Err(Failure::config(format!(
            "unknown experiment {name:?}: expected kalman-rate, coupling, or boltzmann-figures"
        )));
    }
    let (spec, config_value) = load_spec(config_path)?;
    let job = spec.build().map_err(Failure::config)?;
    if !job.is_experiment() {
        return Err(Failure::config(format!(
            "{} defines a {} sampler job; use the `sample` subcommand",
            config_path.display(),
            job.dispatch_name()
        )));
    }
    if job.dispatch_name() != wanted {
        return Err(Failure::config(format!(
            "{} defines a {} experiment, but --name {} was requested",
            config_path.display(),
            job.dispatch_name(),
            wanted
        )));
    }
    let seed = resolve_seed(seed_flag, spec.seed)?;
    let started = Instant::now();
    let mut manifest = Manifest::new(config_value, seed);
    eprintln!("psample: running experiment {wanted} (seed {seed})");

    match job {
        BuiltJob::RateStudy { problem, config } => {
            let report =
                experiment_kalman_rate(&problem, &config, seed).map_err(classify_run_error)?;
            eprintln!(
                "psample: rate study fitted slope {:.3} over {} ensemble sizes",
                report.fit_first.slope,
                report.cells.len()
            );
            write_rate_bundle(&report, out, &mut manifest).map_err(Failure::runtime)?;
        }
        BuiltJob::Coupling { problem, config } => {
            let report =
                experiment_coupling(&problem, &config, seed).map_err(classify_run_error)?;
            eprintln!(
                "psample: coupling study fitted slope {:.3} over {} ensemble sizes",
                report.fit.slope,
                report.cells.len()
            );
            write_coupling_bundle(&report, out, &mut manifest).map_err(Failure::runtime)?;
        }
        BuiltJob::Figures { config } => {
            let report = experiment_boltzmann_figures(&config, seed).map_err(classify_run_error)?;
            eprintln!(
                "psample: figures for {} finished ({} + {} collisions)",
                report.potential, report.nanbu.collisions, report.bird.collisions
            );
            write_figures_bundle(&report, out, &mut manifest).map_err(Failure::runtime)?;
        }
        _ => unreachable!("sampler jobs were rejected above"),
    }

    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_manifest(&manifest, out)
}

fn run_baseline(
    target: &str,
    n: usize,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(), Failure> {
    let Some(pot) = potential_by_name(target) else {
        return Err(Failure::config(format!(
            "unknown target {target:?}: expected a named potential such as \
             quadratic_1d, doublewell_1d, quadratic_2d, or doublewell_2d"
        )));
    };
    if n == 0 {
        return Err(Failure::config("--n must be at least 1"));
    }
    let seed = resolve_seed(seed_flag, None)?;
    let started = Instant::now();
    let config_value = serde_json::json!({ "target": target, "n": n });
    let mut manifest = Manifest::new(config_value, seed);
    eprintln!("psample: drawing {n} reference samples from {target} (seed {seed})");

    let stream = RngStream::indexed(seed, StreamPurpose::Oracle, 0);
    let sample = equilibrium_sample(&pot, n, &stream).map_err(classify_run_error)?;

    let dim = pot.dim();
    let mut columns = vec!["time".to_string(), "particle_id".to_string()];
    columns.extend((1..=dim).map(|k| format!("x_{k}")));
    columns.extend((1..=dim).map(|k| format!("v_{k}")));
    let mut table = Table::new(columns);
    // Reference rows carry time = -1 to distinguish them from simulator
    // snapshots sharing the same schema.
    append_phase_rows(&mut table, &sample, -1.0);
    write_table(&table, &out.join("samples.csv"))?;

    manifest.note("target", target);
    manifest.note("n", n);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_manifest(&manifest, out)
}

fn run_validate(config_path: &Path) -> Result<(), Failure> {
    let (spec, _) = load_spec(config_path)?;
    let job = spec.build().map_err(Failure::config)?;
    println!(
        "ok: {} defines a valid {} job",
        config_path.display(),
        job.dispatch_name()
    );
    Ok(())
}

fn write_table(table: &Table, path: &Path) -> Result<(), Failure> {
    table.write(path).map_err(Failure::runtime)?;
    eprintln!("psample: wrote {}", path.display());
    Ok(())
}

fn write_manifest(manifest: &Manifest, out: &Path) -> Result<(), Failure> {
    let path = out.join("manifest.json");
    manifest.write(&path).map_err(Failure::runtime)?;
    eprintln!("psample: wrote {}", path.display());
    Ok(())
}
