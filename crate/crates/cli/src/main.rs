//! `cir`: synthetic data, training, evaluation and gradient checks for the
//! composed image retrieval stack.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cir_core::config::RunConfig;
use cir_core::gradcheck::GradcheckOptions;
use cir_core::pipeline;

#[derive(Parser)]
#[command(
    name = "cir",
    version,
    about = "Composed image retrieval at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a single setting, e.g. `--set training.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> cir_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.jsonl and val.jsonl.
    Synth(ConfigArgs),
    /// Train and write a checkpoint plus a per-epoch loss log.
    Train(ConfigArgs),
    /// Score the val split and write the metric report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Evaluate freshly initialized weights instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Compare analytic and finite-difference gradients per component.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Perturb the analytic gradient of one group (self-test of the checker).
        #[arg(long, hide = true, value_name = "GROUP")]
        inject_fault: Option<String>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the effective configuration as JSON.
    Config(ConfigArgs),
}

fn run(cli: Cli) -> cir_core::Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = args.load()?;
            let counts = pipeline::synth(&cfg)?;
            println!(
                "wrote {} train and {} val triplets to {}",
                counts.train,
                counts.val,
                cfg.paths.dataset_dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let summary = pipeline::train_run(&cfg)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                summary.steps,
                summary.initial_loss(),
                summary.final_loss(),
                cfg.paths.checkpoint.display()
            );
        }
        Command::Eval { config, untrained } => {
            let cfg = config.load()?;
            let report = pipeline::eval_run(&cfg, !untrained)?;
            print!("{}", report.render());
        }
        Command::Gradcheck {
            config,
            inject_fault,
            json,
        } => {
            let cfg = config.load()?;
            let options = GradcheckOptions {
                corrupt_group: inject_fault,
            };
            let report = pipeline::gradcheck_run(&cfg, &options)?;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.render());
            }
            if !report.passed() {
                eprintln!("gradient check failed (tolerance {:e})", report.tolerance);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Config(args) => print!("{}", args.load()?.to_json()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CIR_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
