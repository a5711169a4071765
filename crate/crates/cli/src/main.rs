mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Stage};
use pipeline::Pipeline;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<blindtrace_core::Error> for CliError {
    fn from(e: blindtrace_core::Error) -> Self {
        use blindtrace_core::Error as E;
        match e {
            E::Config(_) | E::Version { .. } | E::Parse { .. } => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Blind adversarial perturbations against traffic-analysis classifiers.
#[derive(Parser)]
#[command(name = "blindtrace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and $BLINDTRACE_OUT.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override as a dotted key, e.g. `attack.insertion_count=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import traces and split them.
    Synth(Common),
    /// Train the target classifier.
    Train(Common),
    /// Train a blind perturbation generator against the classifier.
    Attack(Common),
    /// Score the trained generator on the test split.
    Eval(Common),
    /// Train a defended classifier and compare robust accuracy.
    Defend(Common),
    /// Measure transferability from the classifier to a second model.
    Transfer(Common),
    /// Train and score one attack per value of an attack parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Attack parameter: `alpha`, `sigma`, `mu` or a dotted field path.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run the stages listed in the config, in order.
    Run(Common),
}

fn load(c: &Common) -> Result<Pipeline, CliError> {
    let mut sets = c.sets.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    let cfg = ExperimentConfig::load(c.config.as_deref(), &sets)?;
    Ok(Pipeline::new(cfg, c.out.clone()))
}

fn execute(cli: Cli) -> Result<PathBuf, CliError> {
    let single = |c: &Common, stage: Stage| -> Result<PathBuf, CliError> {
        let p = load(c)?;
        p.run(&[stage])?;
        Ok(p.root().to_path_buf())
    };
    match cli.command {
        Command::Synth(c) => single(&c, Stage::Data),
        Command::Train(c) => single(&c, Stage::Model),
        Command::Attack(c) => single(&c, Stage::Attack),
        Command::Eval(c) => single(&c, Stage::Eval),
        Command::Defend(c) => single(&c, Stage::Defense),
        Command::Transfer(c) => single(&c, Stage::Transfer),
        Command::Sweep { common, axis, values } => {
            let mut sets = Vec::new();
            if let Some(a) = axis {
                sets.push(format!("sweep.axis=\"{a}\""));
            }
            if let Some(v) = values {
                let list: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                sets.push(format!("sweep.values=[{}]", list.join(", ")));
            }
            let common = Common {
                sets: [common.sets, sets].concat(),
                ..common
            };
            single(&common, Stage::Sweep)
        }
        Command::Run(c) => {
            let p = load(&c)?;
            let stages = if c.config.is_some() || !c.sets.is_empty() {
                ExperimentConfig::load(c.config.as_deref(), &c.sets)?.stages
            } else {
                ExperimentConfig::default().stages
            };
            p.run(&stages)?;
            Ok(p.root().to_path_buf())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(root) => {
            println!("{}", root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
