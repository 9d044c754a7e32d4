mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{Overrides, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "liparch", version, about = "Lip numbers, limit architectures, scaling laws and condensing probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lipschitz report for every block of a source.
    Lip(RunArgs),
    /// Whole-stack report, trajectory and weight-file validation.
    Stack(RunArgs),
    /// Limit-architecture diagnosis.
    Limit(RunArgs),
    /// Steps, model-size, data-size and joint scaling experiments.
    Scaling(RunArgs),
    /// Covering constants of deep MLPs and transformers.
    Covering(RunArgs),
    /// Condensing probe over injection depths and layers.
    Probe(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Caps the global pool at `LIPARCH_THREADS`, when set.
fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("LIPARCH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("LIPARCH_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("liparch: {e}");
        std::process::exit(EXIT_VALIDATION);
    }
    let (f, args): (fn(&Overrides) -> _, RunArgs) = match cli.command {
        Command::Lip(a) => (commands::lip, a),
        Command::Stack(a) => (commands::stack, a),
        Command::Limit(a) => (commands::limit, a),
        Command::Scaling(a) => (commands::scaling, a),
        Command::Covering(a) => (commands::covering, a),
        Command::Probe(a) => (commands::probe, a),
    };
    let o = Overrides {
        config: args.config,
        seed: args.seed,
        out: args.out,
    };
    std::process::exit(commands::dispatch(f, &o));
}
