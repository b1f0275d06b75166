use std::path::PathBuf;
use std::process::ExitCode;

use catflow::checks::Fault;
use catflow::sampling::Scheme;
use catflow_cli::ablation::cmd_ablate;
use catflow_cli::commands::{
    cmd_eval, cmd_generate, cmd_sample, cmd_train, cmd_verify, resolve_config, Overrides, SampleOptions,
};
use catflow_cli::{CliError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "catflow",
    version,
    about = "Variational flow matching for categorical data and graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    Scheme::parse(s).map_err(|e| e.to_string())
}

fn parse_fault(s: &str) -> std::result::Result<Fault, String> {
    Fault::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write training and held-out datasets.
    Generate(Common),
    /// Train a model and write checkpoints and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total training steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Integration steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
    },
    /// Compare generated graphs with a reference set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Run the identity, gradient and equivariance checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break one check (for testing the harness).
        #[arg(long, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
    },
    /// Sweep data fraction, depth and objective.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = resolve_config(c.config.as_deref(), &c.overrides())?;
            let m = cmd_generate(&cfg)?;
            println!("{}", serde_json::to_string(&m.metrics).expect("json"));
        }
        Command::Train {
            common,
            checkpoint,
            steps,
        } => {
            let ov = Overrides {
                steps,
                ..common.overrides()
            };
            let cfg = resolve_config(common.config.as_deref(), &ov)?;
            let m = cmd_train(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string(&m.metrics).expect("json"));
        }
        Command::Sample {
            common,
            checkpoint,
            n,
            steps,
            scheme,
        } => {
            let ov = Overrides {
                scheme,
                ..common.overrides()
            };
            let (m, _) = cmd_sample(common.config.as_deref(), &checkpoint, &ov, &SampleOptions { n, steps })?;
            println!("{}", serde_json::to_string(&m.metrics).expect("json"));
        }
        Command::Eval {
            common,
            reference,
            samples,
        } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            for row in cmd_eval(&cfg, &reference, &samples)? {
                println!("{:<12} {:.6e}", row.metric, row.value);
            }
        }
        Command::Verify { seed, inject_fault } => {
            let outcomes = cmd_verify(seed, inject_fault)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Ablate(c) => {
            let cfg = resolve_config(c.config.as_deref(), &c.overrides())?;
            let (_, rows) = cmd_ablate(&cfg)?;
            for r in rows {
                println!("{},{},{},{}", r.data_fraction, r.n_layers, r.objective.name(), r.score);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
