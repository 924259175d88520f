mod scenario;

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use smac_core::sim::trace_to_jsonl;
use smac_core::{check_buildable, run, run_traced, BehaviorKind, Buildability, RunMetrics, Scenario, SimError};

/// Simulator for smart-block structures built by inchworm robots.
#[derive(Parser)]
#[command(name = "smac", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a blueprint can be built bottom-up.
    Validate {
        /// Blueprint text file or scenario TOML.
        file: PathBuf,
    },
    /// Run one scenario and print its metrics as JSON.
    Run {
        /// Scenario TOML or bare blueprint file.
        file: PathBuf,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        max_ticks: Option<u64>,
    },
    /// Run a scenario for a range of agent counts and seeds and emit CSV.
    Sweep {
        file: PathBuf,
        /// Inclusive agent range such as `1..4`, or a single count.
        #[arg(long, value_parser = parse_range)]
        agents: RangeInclusive<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let bad = || format!("expected A..B or N, got `{s}`");
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b < a {
        return Err(format!("agent range must be non-empty and start at 1 or more, got `{s}`"));
    }
    Ok(a..=b)
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// The input was fine but the outcome was not (unbuildable, incomplete).
    Domain,
    /// Unreadable or malformed input.
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run { file, agents, seed, trace, max_ticks } => {
            run_one(&file, agents, seed, trace.as_deref(), max_ticks)
        }
        Command::Sweep { file, agents, seeds, out } => sweep(&file, agents, &seeds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn validate(file: &Path) -> Result<(), Failure> {
    let bp = scenario::load(file)?.blueprint;
    match check_buildable(&bp) {
        Buildability::Buildable => {
            println!("buildable: {} blocks in {} layers", bp.len(), bp.max_z() + 1);
            Ok(())
        }
        Buildability::Unbuildable(violations) => {
            println!("unbuildable: {} cells cannot be placed bottom-up", violations.len());
            for c in violations {
                println!("  {c}");
            }
            Err(Failure::Domain)
        }
    }
}

/// Validates before running so that input problems exit with 2 and an
/// unbuildable blueprint with 1.
fn checked(s: &Scenario) -> Result<(), Failure> {
    match s.validate() {
        Ok(()) => Ok(()),
        Err(SimError::Unbuildable(cells)) => {
            let list: Vec<String> = cells.iter().map(ToString::to_string).collect();
            eprintln!("unbuildable blueprint: {}", list.join(" "));
            Err(Failure::Domain)
        }
        Err(e) => Err(Failure::Input(e.into())),
    }
}

fn run_one(
    file: &Path,
    agents: Option<usize>,
    seed: Option<u64>,
    trace: Option<&Path>,
    max_ticks: Option<u64>,
) -> Result<(), Failure> {
    let mut s = scenario::load(file)?;
    if let Some(n) = agents {
        s.agent_count = n;
    }
    if let Some(seed) = seed {
        s.rng_seed = seed;
    }
    if let Some(t) = max_ticks {
        s.max_ticks = t;
    }
    checked(&s)?;
    let (metrics, records) = match run_traced(s) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("simulation failed: {e}");
            return Err(Failure::Domain);
        }
    };
    if let Some(path) = trace {
        std::fs::write(path, trace_to_jsonl(&records)).with_context(|| format!("writing {}", path.display()))?;
    }
    // A closed pipe on stdout is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", metrics.to_json());
    if metrics.completed {
        Ok(())
    } else {
        eprintln!("not completed after {} ticks", metrics.total_ticks);
        for d in &metrics.diagnostics {
            eprintln!("  {d}");
        }
        Err(Failure::Domain)
    }
}

#[derive(Serialize)]
struct SweepRow {
    agents: usize,
    seed: u64,
    completed: bool,
    total_ticks: u64,
    total_seconds: f64,
    update_ms: u64,
    wait_ms: u64,
    move_ms: u64,
    build_ms: u64,
    ferry_ms: u64,
    wait_share: f64,
}

impl SweepRow {
    fn new(agents: usize, seed: u64, m: &RunMetrics) -> Self {
        let sum = |k: BehaviorKind| m.agents.iter().map(|a| a.tallies.get(&k).copied().unwrap_or(0)).sum();
        Self {
            agents,
            seed,
            completed: m.completed,
            total_ticks: m.total_ticks,
            total_seconds: m.total_seconds,
            update_ms: sum(BehaviorKind::Update),
            wait_ms: sum(BehaviorKind::Wait),
            move_ms: sum(BehaviorKind::Move),
            build_ms: sum(BehaviorKind::Build),
            ferry_ms: sum(BehaviorKind::Ferry),
            wait_share: m.share(&[BehaviorKind::Wait]),
        }
    }
}

fn sweep(file: &Path, agents: RangeInclusive<usize>, seeds: &[u64], out: Option<&Path>) -> Result<(), Failure> {
    if seeds.is_empty() {
        return Err(Failure::Input(anyhow::anyhow!("seed list is empty")));
    }
    let base = scenario::load(file)?;
    checked(&base)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    let mut all_done = true;
    for n in agents {
        for &seed in seeds {
            let mut s = base.clone();
            s.agent_count = n;
            s.rng_seed = seed;
            let m = run(s).with_context(|| format!("agents {n}, seed {seed}"))?;
            all_done &= m.completed;
            csv.serialize(SweepRow::new(n, seed, &m)).context("writing table")?;
        }
    }
    csv.flush().context("writing table")?;
    if all_done {
        Ok(())
    } else {
        eprintln!("some runs did not complete");
        Err(Failure::Domain)
    }
}
