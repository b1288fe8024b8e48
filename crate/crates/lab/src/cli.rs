//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use icq_core::dataset::{collect_dataset, collect_mmdp_dataset};
use icq_core::{MmdpSpec, OfflineDataset};

use crate::config::{load_mdp, ExperimentConfig};
use crate::error::LabError;
use crate::plot::{plot, PlotKind};
use crate::runner::run_experiment;
use crate::verify::{run_suite, Suite};

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "ICQ_LAB_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "icq-lab",
    version,
    about = "Offline multi-agent RL experiments on tabular MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect an expert/uniform mixture dataset as JSONL.
    Collect {
        /// `mmdp` or a path to a tabular MDP JSON file.
        #[arg(long)]
        env: String,
        /// Number of agents (mmdp only).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
        agents: Option<u64>,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
        trajectories: u64,
        /// Trajectories generated by the optimal policy.
        #[arg(long, default_value_t = 4)]
        expert: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (environment, learner, seed) cell of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a randomized property suite.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        instances: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional per-instance CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render metrics or verification CSVs to SVG.
    Plot {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotKind::Qcurve)]
        kind: PlotKind,
    },
}

enum Failure {
    Usage(String),
    Runtime(LabError),
    Check(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Runtime(e)
    }
}

impl From<icq_core::dataset::DatasetError> for Failure {
    fn from(e: icq_core::dataset::DatasetError) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Relative output paths land under `ICQ_LAB_OUT` when it is set.
fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn ensure_parent(path: &Path) -> Result<(), LabError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e)),
        None => Ok(()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let subcommand = args.get(1).and_then(|a| a.to_str()).map(str::to_string);
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == EXIT_USAGE && !rendered.contains("Usage:") {
                eprintln!("\n{}", usage(subcommand.as_deref()));
            }
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", usage(subcommand.as_deref()));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            EXIT_FAILURE
        }
    }
}

/// Usage line of `subcommand`, or of the whole program.
fn usage(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = subcommand.and_then(|name| cmd.find_subcommand_mut(name).cloned());
    match sub {
        Some(mut sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Collect {
            env,
            agents,
            trajectories,
            expert,
            seed,
            out,
        } => collect(
            &env,
            agents,
            trajectories as usize,
            expert as usize,
            seed,
            &out,
        ),
        Command::Train { config } => {
            let config = ExperimentConfig::load(&config)?;
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from);
            let report = run_experiment(&config, root.as_deref())?;
            for r in &report.runs {
                let last = r.metrics.last();
                println!(
                    "{} {} seed {}: q {} return {:.1} diverged {} unseen reads {}",
                    r.environment,
                    r.learner,
                    r.seed,
                    last.and_then(|l| l.q_estimate)
                        .map_or("-".into(), |q| format!("{q:.3}")),
                    last.map_or(0.0, |l| l.eval_return),
                    r.metrics.diverged(),
                    r.unseen_reads
                );
            }
            println!(
                "wrote {} runs and {}",
                report.runs.len(),
                report.aggregate_path.display()
            );
            Ok(())
        }
        Command::Verify {
            suite,
            instances,
            seed,
            out,
        } => {
            let report = run_suite(suite, instances.map(|n| n as usize), seed)?;
            for i in &report.instances {
                let status = if i.passed { "pass" } else { "FAIL" };
                println!(
                    "{} #{:<3} {status}  observed {:.6e}  bound {:.6e}  {}",
                    i.suite, i.instance, i.observed, i.bound, i.detail
                );
            }
            println!("{}", report.summary());
            if let Some(out) = out {
                let out = output_path(&out);
                ensure_parent(&out)?;
                report.write_csv(&out)?;
            }
            if report.all_passed() {
                Ok(())
            } else {
                Err(Failure::Check(format!("{} suite failed", suite.name())))
            }
        }
        Command::Plot { inputs, out, kind } => {
            let out = output_path(&out);
            let figure = plot(kind, &inputs, &out)?;
            println!(
                "wrote {} ({} series, {} reference lines) and {}",
                out.display(),
                figure.series.len(),
                figure.references.len(),
                out.with_extension("csv").display()
            );
            Ok(())
        }
    }
}

fn collect(
    env: &str,
    agents: Option<u64>,
    trajectories: usize,
    expert: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    if expert > trajectories {
        return Err(Failure::Usage(format!(
            "--expert ({expert}) cannot exceed --trajectories ({trajectories})"
        )));
    }
    let ds: OfflineDataset = if env == "mmdp" {
        let Some(n) = agents else {
            return Err(Failure::Usage(
                "--agents is required with --env mmdp".into(),
            ));
        };
        collect_mmdp_dataset(&MmdpSpec::new(n as usize), trajectories, expert, seed)?
    } else {
        if agents.is_some() {
            return Err(Failure::Usage("--agents only applies to --env mmdp".into()));
        }
        let path = Path::new(env);
        if !path.is_file() {
            return Err(Failure::Usage(format!(
                "--env must be `mmdp` or an MDP JSON file, got `{env}`"
            )));
        }
        collect_dataset(&load_mdp(path)?, trajectories, expert, seed)?
    };
    let out = output_path(out);
    ensure_parent(&out)?;
    ds.save(&out)?;
    let na = ds.num_joint_actions();
    println!(
        "wrote {}: {} trajectories, {} transitions",
        out.display(),
        ds.trajectories().len(),
        ds.num_transitions()
    );
    println!(
        "seen pairs: {}/{} ({:.1}%)",
        ds.num_seen_pairs(),
        ds.num_states() * na,
        100.0 * ds.seen_fraction()
    );
    for s in 0..ds.num_states() {
        let seen = (0..na).filter(|&a| ds.pair_count(s, a) > 0).count();
        println!(
            "  state {s}: {} visits, {seen}/{na} joint actions seen",
            ds.state_count(s)
        );
    }
    Ok(())
}
