use clap::{Parser, Subcommand};

use vl_cli::commands::{
    cmd_ablate_freeze, cmd_evaluate, cmd_finetune, cmd_gen_data, cmd_init_compare,
    cmd_param_report, cmd_pretrain, exit_code,
};
use vl_cli::config::load_config;

/// Desk-scale vision-language encoder experiments.
#[derive(Parser)]
#[command(name = "vl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    GenData(CommonArgs),
    /// Pretrain with masked language modeling and image-text matching.
    Pretrain(CommonArgs),
    /// Fine-tune a pretrained checkpoint on a downstream task.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Evaluate(CommonArgs),
    /// Run the 2x2 tower-freezing grid and emit a consolidated report.
    AblateFreeze(CommonArgs),
    /// Compare random vs text-encoder vs vision-encoder initialization.
    InitCompare(CommonArgs),
    /// Per-module parameter totals, trainable counts, and state sizes.
    ParamReport(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: std::path::PathBuf,
    /// Leaf overrides of the form path.to.field=value.
    #[arg(value_name = "OVERRIDE")]
    overrides: Vec<String>,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fine-tune with frozen modules anyway (the published procedure
    /// fine-tunes fully unfrozen).
    #[arg(long)]
    allow_frozen: bool,
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_gen_data(&config)?;
        }
        Command::Pretrain(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_pretrain(&config)?;
        }
        Command::Finetune(args) => {
            let config = load_config(&args.common.config, &args.common.overrides)?;
            cmd_finetune(&config, args.allow_frozen)?;
        }
        Command::Evaluate(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_evaluate(&config)?;
        }
        Command::AblateFreeze(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_ablate_freeze(&config)?;
        }
        Command::InitCompare(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_init_compare(&config)?;
        }
        Command::ParamReport(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            cmd_param_report(&config)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        let code = exit_code(&err);
        eprintln!("error[{code}]: {err:#}");
        std::process::exit(code);
    }
}
