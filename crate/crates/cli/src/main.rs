use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use dualrl_cli::commands::{self, SimInputs};
use dualrl_cli::config::{resolve, Resolved};
use dualrl_cli::provenance::{Artifacts, Provenance};
use dualrl_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "dualrl", version, about = "Adaptive time-pressure feedback with two reinforcement learning agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set agent.epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice; also stamped into every nested `seed` key.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic prior-study dataset.
    GenData(Common),
    /// Train the answer agent on a generated question bank.
    TrainAnswer(Common),
    /// Fit the choice/RT baseline on a dataset.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV from gen-data.
        #[arg(long)]
        dataset: PathBuf,
        /// Answer agent checkpoint.
        #[arg(long)]
        answer: PathBuf,
    },
    /// Train the simulation agent and report held-out MAPE.
    TrainSim {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV from gen-data.
        #[arg(long)]
        dataset: PathBuf,
        /// Answer agent checkpoint.
        #[arg(long)]
        answer: PathBuf,
        /// Baseline checkpoint; fitted on the training users when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train the regulation policy against the simulation agent or synthetic users.
    TrainReg {
        #[command(flatten)]
        common: Common,
        /// Simulation policy checkpoint (with `target = "sim"`).
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Baseline checkpoint (with `target = "sim"`).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Answer agent checkpoint (with `target = "sim"`).
        #[arg(long)]
        answer: Option<PathBuf>,
    },
    /// Compare RL, random, no and constant pressure on synthetic users.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Regulation policy checkpoint; only the reference controllers run without it.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run the session service.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Regulation policy checkpoint; required to admit RL-group sessions.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Event log directory; defaults to `<out>/sessions`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

struct Run<T> {
    cfg: T,
    seed: u64,
    out: Artifacts,
}

/// Resolves the config, logs it, and prepares the artifact directory.
fn prepare<T: Serialize + DeserializeOwned + Default>(name: &str, c: &Common) -> CliResult<Option<Run<T>>> {
    let Resolved { config, toml, hash } = resolve::<T>(name, c.seed, c.config.as_deref(), &c.overrides)?;
    if c.print_config {
        let _ = std::io::stdout().write_all(toml.as_bytes());
        return Ok(None);
    }
    let argv: Vec<String> = std::env::args().collect();
    let provenance = Provenance::new(argv.join(" "), hash.clone(), c.seed);
    eprintln!("# {name} seed={} config_hash={hash}\n{toml}", c.seed);
    let out = Artifacts::new(&c.out, provenance)?;
    out.config(&format!("{name}.config.toml"), &toml)?;
    Ok(Some(Run { cfg: config, seed: c.seed, out }))
}

fn report<T: Serialize>(r: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(r).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => {
            if let Some(r) = prepare::<commands::GenDataConfig>("gen-data", &c)? {
                report(&commands::gen_data(&r.cfg, r.seed, &r.out)?)?;
            }
        }
        Command::TrainAnswer(c) => {
            if let Some(r) = prepare::<commands::TrainAnswerConfig>("train-answer", &c)? {
                report(&commands::train_answer(&r.cfg, r.seed, &r.out)?)?;
            }
        }
        Command::TrainBaseline { common, dataset, answer } => {
            if let Some(r) = prepare::<commands::TrainBaselineConfig>("train-baseline", &common)? {
                report(&commands::train_baseline(&r.cfg, r.seed, &dataset, &answer, &r.out)?)?;
            }
        }
        Command::TrainSim { common, dataset, answer, baseline } => {
            if let Some(r) = prepare::<commands::TrainSimConfig>("train-sim", &common)? {
                report(&commands::train_sim(&r.cfg, r.seed, &dataset, &answer, baseline.as_deref(), &r.out)?)?;
            }
        }
        Command::TrainReg { common, sim, baseline, answer } => {
            if let Some(r) = prepare::<commands::TrainRegConfig>("train-reg", &common)? {
                report(&commands::train_reg(&r.cfg, r.seed, &SimInputs { sim, baseline, answer }, &r.out)?)?;
            }
        }
        Command::Eval { common, policy } => {
            if let Some(r) = prepare::<commands::EvalConfig>("eval", &common)? {
                report(&commands::eval(&r.cfg, r.seed, policy.as_deref(), &r.out)?)?;
            }
        }
        Command::Serve { common, policy, store } => {
            if let Some(r) = prepare::<commands::ServeConfig>("serve", &common)? {
                let store = store.unwrap_or_else(|| r.out.path("sessions"));
                commands::serve(&r.cfg, r.seed, policy.as_deref(), Path::new(&store))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dualrl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
