use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ppc_cli::commands::{cmd_ablate, cmd_evaluate, cmd_generate, cmd_pretrain, cmd_rldaf, cmd_train_disc};
use ppc_cli::{ExperimentConfig, Overrides, Session, Variant};

/// Dynamic-prefix controlled generation on a toy transformer.
#[derive(Parser)]
#[command(name = "ppc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the language model on the synthetic corpus.
    Pretrain(Common),
    /// Train the steering discriminator and the evaluation judge.
    TrainDisc(Common),
    /// Fine-tune the adapter and prefix bank with policy gradients.
    Rldaf {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "prompt-ppc")]
        variant: Variant,
    },
    /// Generate one steered continuation.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "prompt-ppc")]
        variant: Variant,
        /// Space-separated words; `<bos>` is prepended when missing.
        #[arg(long)]
        prompt: String,
        /// Topic or class name.
        #[arg(long)]
        target: String,
    },
    /// Score one variant from saved checkpoints.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "prompt-ppc")]
        variant: Variant,
    },
    /// Run every variant end to end and write the comparison table.
    Ablate(Common),
}

fn session(c: &Common) -> Result<Session> {
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
    };
    Session::new(ExperimentConfig::load(c.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&session(&c)?),
        Command::TrainDisc(c) => cmd_train_disc(&session(&c)?),
        Command::Rldaf { common, variant } => cmd_rldaf(&session(&common)?, variant),
        Command::Generate {
            common,
            variant,
            prompt,
            target,
        } => cmd_generate(&session(&common)?, variant, &prompt, &target),
        Command::Evaluate { common, variant } => cmd_evaluate(&session(&common)?, variant),
        Command::Ablate(c) => {
            let report = cmd_ablate(&session(&c)?)?;
            let mut out = report.to_csv();
            for check in &report.checks {
                let status = if check.holds { "holds" } else { "VIOLATED" };
                out.push_str(&format!("{status}: {} ({})\n", check.name, check.detail));
            }
            Ok(out)
        }
    }
}

/// Kind of the innermost library error, or a generic label.
fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<ppc_core::Error>().map(ppc_core::Error::kind))
        .or_else(|| {
            e.chain()
                .find_map(|c| c.downcast_ref::<toml::de::Error>().map(|_| "config"))
        })
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("other")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
