//! Command-line entry point for the continual-learning benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rainbow::harness::{parse_config, precompute_upper_bounds, run_grid};

#[derive(Parser)]
#[command(
    name = "rainbow",
    about = "Class-incremental learning benchmark with episodic memory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over all of its seeds.
    Run(RunArgs),
    /// Precompute and cache the jointly trained reference accuracies.
    UpperBound(UpperBoundArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of key=value lines ('#' comments allowed).
    #[arg(long)]
    config: PathBuf,
    /// Dataset: mnist or synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Stream setup: disjoint or blurryM (e.g. blurry10).
    #[arg(long)]
    setup: Option<String>,
    /// Training mode: online or offline.
    #[arg(long)]
    mode: Option<String>,
    /// Episodic memory capacity K.
    #[arg(long)]
    memory_size: Option<String>,
    /// Memory update strategy: rainbow, random, reservoir, prototype, or
    /// greedy_balanced.
    #[arg(long)]
    strategy: Option<String>,
    /// Augmentation: none, cutmix, randcompose, or cutmix+randcompose.
    #[arg(long)]
    augment: Option<String>,
    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,
    /// Epoch count (post-task memory epochs online; per-task epochs
    /// offline).
    #[arg(long)]
    epochs: Option<String>,
    /// Output directory for CSVs and the trajectory plot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each boundary's memory contents to memory.csv.
    #[arg(long)]
    dump_memory: bool,
    /// Write per-boundary uncertainty scores to uncertainty_taskT.csv.
    #[arg(long)]
    dump_uncertainty: bool,
    /// Write the task streams' sample order to stream.txt.
    #[arg(long)]
    dump_stream: bool,
}

#[derive(Args)]
struct UpperBoundArgs {
    /// Config file of key=value lines ('#' comments allowed).
    #[arg(long)]
    config: PathBuf,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("dataset", &self.dataset);
        push("setup", &self.setup);
        push("mode", &self.mode);
        push("memory_size", &self.memory_size);
        push("strategy", &self.strategy);
        push("augment", &self.augment);
        push("seeds", &self.seeds);
        push("epochs", &self.epochs);
        if let Some(out) = &self.out {
            pairs.push(("out".to_string(), out.display().to_string()));
        }
        for (key, on) in [
            ("dump_memory", self.dump_memory),
            ("dump_uncertainty", self.dump_uncertainty),
            ("dump_stream", self.dump_stream),
        ] {
            if on {
                pairs.push((key.to_string(), "true".to_string()));
            }
        }
        pairs
    }
}

fn real_main(cli: Cli) -> rainbow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = parse_config(Some(&args.config), &args.overrides())?;
            run_grid(&cfg)?;
            println!("results written to {}", cfg.out.display());
        }
        Command::UpperBound(args) => {
            let cfg = parse_config(Some(&args.config), &[])?;
            precompute_upper_bounds(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Clap itself exits with code 2 on usage errors, matching the
    // configuration-error convention.
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
