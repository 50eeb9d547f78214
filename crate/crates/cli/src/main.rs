use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use coopdiag::behavior::Strategy;
use coopdiag::sim::{
    aggregate, compare_csv, compare_table, phases_from_onsets, run_simulation, to_csv, Note,
    Phase, RunResult, RunSummary, Scenario, ScenarioError,
};

#[derive(Parser)]
#[command(name = "coopdiag", version, about = "Cooperative diagnosis simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and report every problem with its document path.
    Validate { path: PathBuf },
    /// Run one simulation and emit per-episode CSV plus a summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        episodes: Option<u32>,
        /// CSV destination; stdout when omitted (the summary then goes to stderr).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the message log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Episode numbers that start new summary phases, e.g. `30,60,90`.
        /// Defaults to the scenario's failure onsets.
        #[arg(long, value_delimiter = ',')]
        phase_onsets: Option<Vec<u32>>,
        /// Print failure injections, clearances and agent records to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Run several strategies over several seeds and aggregate.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "passive,remedial,cooperative")]
        strategies: Vec<Strategy>,
        /// Inclusive range `n..m` or a comma list.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        episodes: Option<u32>,
        /// Aggregate CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// exit codes
const INVALID: u8 = 1;
const FAILED: u8 = 3;

enum Failure {
    Invalid(ScenarioError),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { path } => validate(&path),
        Command::Run {
            scenario,
            strategy,
            seed,
            episodes,
            out,
            log,
            phase_onsets,
            verbose,
        } => run(&scenario, strategy, seed, episodes, out, log, phase_onsets, verbose),
        Command::Compare {
            scenario,
            strategies,
            seeds,
            episodes,
            out,
        } => compare(&scenario, &strategies, &seeds, episodes, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("invalid scenario: {e}");
            ExitCode::from(INVALID)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(FAILED)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Other)?;
    Scenario::from_json(&text).map_err(Failure::Invalid)
}

fn validate(path: &Path) -> Result<(), Failure> {
    let s = load(path)?;
    println!(
        "valid: {} ({} agents, {} background clients, {} failures, {} episodes)",
        s.name,
        s.agents.len(),
        s.background.len(),
        s.failures.len(),
        s.run.episodes
    );
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summary_text(s: &Scenario, r: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {}", s.name);
    let _ = writeln!(out, "strategy: {}  seed: {}  episodes: {}", r.strategy, r.seed, r.episodes);
    let _ = writeln!(out, "accumulated cost: {:.2}", r.accumulated_cost);
    let _ = writeln!(out, "violation episodes: {}", r.violation_episodes);
    let fin = if r.final_active_failures.is_empty() {
        "none".to_string()
    } else {
        r.final_active_failures.join(", ")
    };
    let _ = writeln!(out, "final active failures: {fin}");
    let _ = writeln!(out, "mean response time by phase:");
    for p in &r.phases {
        let _ = writeln!(
            out,
            "  {:<12} {:>9} {:>10.2} ms  ({} violating)",
            p.phase.label,
            format!("{}-{}", p.phase.first, p.phase.last),
            p.mean_response_ms,
            p.violations
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run(
    path: &Path,
    strategy: Strategy,
    seed: u64,
    episodes: Option<u32>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    phase_onsets: Option<Vec<u32>>,
    verbose: bool,
) -> Result<(), Failure> {
    let s = load(path)?;
    let r = run_simulation(&s, strategy, seed, episodes).map_err(anyhow::Error::from)?;
    if verbose {
        report(&r);
    }
    let summary = match phase_onsets {
        Some(onsets) => {
            let n = r.metrics.len() as u32;
            let mut onsets = onsets;
            onsets.sort_unstable();
            onsets.dedup();
            if let Some(bad) = onsets.iter().find(|o| **o == 0 || **o > n) {
                return Err(anyhow::anyhow!("phase onset {bad} outside 1..={n}").into());
            }
            let labelled: Vec<(u32, String)> = onsets.iter().map(|o| (*o, format!("e{o}"))).collect();
            let phases: Vec<Phase> = phases_from_onsets(&labelled, n);
            RunSummary::from_metrics(
                strategy,
                seed,
                &r.metrics,
                r.summary.final_active_failures.clone(),
                &phases,
            )
        }
        None => r.summary.clone(),
    };
    write_or_print(out.as_deref(), &to_csv(&r.metrics))?;
    if let Some(p) = &log {
        fs::write(p, r.log.render())
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Other)?;
    }
    let text = summary_text(&s, &summary);
    if out.is_some() {
        print!("{text}");
    } else {
        eprint!("{text}");
    }
    Ok(())
}

fn report(r: &RunResult) {
    for (t, note) in &r.log.notes {
        let ms = *t as f64 / 1000.0;
        match note {
            Note::FailureInjected { failure, episode } => {
                eprintln!("[{ms:>10.3}] inject {failure} (episode {episode})")
            }
            Note::FailureCleared { failure, component, by } => {
                eprintln!("[{ms:>10.3}] {by} cleared {component} part of {failure}")
            }
            Note::NothingToClear { agent, action } => {
                eprintln!("[{ms:>10.3}] warning: {agent} {action} found nothing to clear")
            }
            Note::Refused { agent, service, request } => {
                eprintln!("[{ms:>10.3}] warning: {agent} refused {request} for `{service}`")
            }
        }
    }
    for (t, agent, rec) in &r.log.records {
        eprintln!("[{:>10.3}] {agent}: {rec:?}", *t as f64 / 1000.0);
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty seed range {spec}");
        }
        return Ok((a..=b).collect());
    }
    let seeds = spec
        .split(',')
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed `{x}`")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn compare(
    path: &Path,
    strategies: &[Strategy],
    seeds: &str,
    episodes: Option<u32>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let s = load(path)?;
    let seeds = parse_seeds(seeds)?;
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|st| seeds.iter().map(move |k| (*st, *k)))
        .collect();
    // independent engines in parallel; results land in job order
    let slots: Vec<Mutex<Option<Result<RunSummary>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(st, seed)) = jobs.get(i) else { break };
                let r = run_simulation(&s, st, seed, episodes)
                    .map(|r| r.summary)
                    .with_context(|| format!("{st} seed {seed}"));
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let summaries = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&summaries);
    if let Some(p) = &out {
        fs::write(p, compare_csv(&rows))
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Other)?;
    }
    print!("{}", compare_table(&rows));
    Ok(())
}
