//! `crowdctl`: build policies, run simulation and replay suites, and emit
//! report data.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crowdctl::experiments::{emit_plots_data, run_suite_with, ComparisonReport, ExperimentSpec, ReplayInput, SuitePlans};
use crowdctl::pricing::Plan;
use crowdctl::sim::{run_episode_traced, ControllerSpec, SimConfig};
use crowdctl::trace::write_gold_csv;

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "crowdctl", version, about = "Pay and quality control for batches of binary crowd tasks")]
struct Cli {
    /// Worker threads for suites and planning (default: all cores).
    #[arg(long, short = 'j', global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the adaptive policy for every rate scale of an experiment.
    Plan {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run a simulation suite and write its report.
    Simulate {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run a suite against a recorded ballot trace.
    Replay {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Ballot trace CSV (overrides the experiment file).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Gold label CSV (overrides the experiment file).
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Re-emit CSV files from a saved report.json.
    Report {
        /// Path to report.json.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (default: the report's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect a saved policy.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Run one episode and write its result, ballot trace and gold labels.
    Episode {
        /// Simulation config TOML.
        #[arg(long)]
        config: PathBuf,
        /// Controller name, e.g. `adaptive`, `static-3`, `gao-2`.
        #[arg(long, default_value = "adaptive")]
        controller: ControllerSpec,
        /// Episode seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Plan cache directory.
        #[arg(long)]
        plan_cache: Option<PathBuf>,
        /// Output directory for result.json, epochs.csv, trace.csv and gold.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Write one CSV row per feasible state of a saved policy.
    Inspect {
        /// Policy directory written by `plan`.
        #[arg(long)]
        plan: PathBuf,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// First seed (overrides the experiment file).
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per cell (overrides the experiment file).
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory (overrides the experiment file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plan cache directory (overrides the experiment file).
    #[arg(long)]
    plan_cache: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            spec.first_seed = s;
        }
        if let Some(n) = self.seeds {
            spec.seeds = n;
        }
        if let Some(o) = &self.out {
            spec.output_dir = Some(o.clone());
        }
        if let Some(p) = &self.plan_cache {
            spec.plan_cache = Some(p.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every cell completed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Plan { exp } => {
            let spec = exp.load()?;
            let root = spec.plan_cache.clone().or(spec.output_dir.clone()).context("set --plan-cache or --out")?;
            for &scale in &spec.rate_scales {
                let dir = ExperimentSpec::plan_dir(&root, scale);
                let (plan, cached) = Plan::load_or_build(&dir, &spec.plan_config(scale))?;
                let d = plan.diagnostics();
                outln!(
                    "{}: {} ({} of {} states feasible, start value {:.2})",
                    dir.display(),
                    if cached { "up to date" } else { "built" },
                    d.feasible_states,
                    d.total_states,
                    d.start_value
                );
            }
            Ok(true)
        }
        Command::Simulate { exp } => {
            let spec = exp.load()?;
            if spec.replay.is_some() {
                bail!("the experiment names a replay trace; use `crowdctl replay`");
            }
            suite(&spec)
        }
        Command::Replay { exp, trace, gold } => {
            let mut spec = exp.load()?;
            match (trace, gold, spec.replay.take()) {
                (Some(trace), Some(gold), _) => spec.replay = Some(ReplayInput { trace, gold }),
                (None, None, Some(r)) => spec.replay = Some(r),
                (t, g, Some(r)) => spec.replay = Some(ReplayInput { trace: t.unwrap_or(r.trace), gold: g.unwrap_or(r.gold) }),
                _ => bail!("replay needs both --trace and --gold"),
            }
            suite(&spec)
        }
        Command::Report { input, out } => {
            let report: ComparisonReport = serde_json::from_reader(File::open(&input).with_context(|| format!("opening {}", input.display()))?)?;
            let dir = out.unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
            for p in emit_plots_data(&report, &dir)? {
                outln!("{}", p.display());
            }
            print_summary(&report)?;
            Ok(report.is_complete())
        }
        Command::Policy { command: PolicyCommand::Inspect { plan, out } } => {
            let plan = Plan::load(&plan).with_context(|| format!("loading policy from {}", plan.display()))?;
            match out {
                Some(path) => plan.write_inspect_csv(File::create(path)?)?,
                None => plan.write_inspect_csv(std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Episode { config, controller, seed, plan_cache, out } => {
            let mut cfg = SimConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let spec = ExperimentSpec {
                controllers: vec![controller],
                reference: controller,
                deadlines_minutes: vec![cfg.deadline_minutes],
                rate_scales: vec![1.0],
                seeds: 1,
                first_seed: cfg.seed,
                alpha: 0.05,
                output_dir: None,
                plan_cache,
                replay: None,
                sim: cfg.clone(),
            };
            let plans = SuitePlans::prepare(&spec)?;
            let (result, trace) = run_episode_traced(&cfg, &plans.controller(controller, 0)?)?;
            std::fs::create_dir_all(&out)?;
            File::create(out.join("result.json"))?.write_all(result.to_json()?.as_bytes())?;
            result.write_epoch_csv(File::create(out.join("epochs.csv"))?)?;
            trace.save(&out.join("trace.csv"))?;
            write_gold_csv(&result.truth, File::create(out.join("gold.csv"))?)?;
            outln!(
                "{controller}: utility {:.2}, accuracy {:.4}, cost {:.2}, {} ballots",
                result.utility, result.accuracy, result.total_cost, result.ballots
            );
            Ok(true)
        }
    }
}

fn suite(spec: &ExperimentSpec) -> Result<bool> {
    let dir = spec.output_dir.clone().context("set --out or `output_dir`")?;
    let plans = SuitePlans::prepare(spec)?;
    let report = run_suite_with(spec, &plans)?;
    report.write(&dir)?;
    print_summary(&report)?;
    for f in &report.failures {
        eprintln!("failed: {} at {} min, scale {}, seed {}: {}", f.controller, f.deadline_minutes, f.rate_scale, f.seed, f.error);
    }
    outln!("report written to {}", dir.display());
    Ok(report.is_complete())
}

fn print_summary(report: &ComparisonReport) -> Result<()> {
    outln!(
        "{:<22} {:>6} {:>9} {:>5} {:>12} {:>12} {:>9} {:>8} {:>10}",
        "controller", "scale", "deadline", "runs", "utility", "ci_half", "accuracy", "norm", "p"
    );
    for c in &report.cells {
        let half = c.utility.ci_high.map(|h| h - c.utility.mean);
        let p = match c.vs_reference {
            Some(w) => format!("{:.4}{}", w.p_value, if w.significant { "*" } else { "" }),
            None => "-".into(),
        };
        outln!(
            "{:<22} {:>6} {:>9} {:>5} {:>12.2} {:>12} {:>9.4} {:>8} {:>10}",
            c.controller.to_string(),
            c.rate_scale,
            c.deadline_minutes,
            c.runs,
            c.utility.mean,
            half.map(|h| format!("{h:.2}")).unwrap_or_else(|| "-".into()),
            c.accuracy.mean,
            c.normalized_utility.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
            p
        );
    }
    Ok(())
}
