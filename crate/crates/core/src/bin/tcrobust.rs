use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcrobust::harness::{self, Command, RunConfig, EXIT_CONFIG, EXIT_OTHER};

#[derive(Parser)]
#[command(name = "tcrobust", version, about = "Robust utility maximization under proportional transaction costs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Noise seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, env = "ENGINE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate price panels for every model.
    Simulate,
    /// Check consistent price systems for every model.
    VerifyCps,
    /// Maximize the worst-case expected utility.
    Solve,
    /// Solve, then run the conjugate-duality diagnostics.
    Duality,
    /// Built-in sanity checks.
    Selftest,
}

const SELFTEST_CONFIG: &str = r#"{
    "thetas": [{"model": "arctan"}],
    "lambda": 0.5,
    "utility": {"kind": "log"}
}"#;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::VerifyCps => Command::VerifyCps,
        Cmd::Solve => Command::Solve,
        Cmd::Duality => Command::Duality,
        Cmd::Selftest => Command::Selftest,
    };
    let loaded = match (&cli.config, command) {
        (Some(p), _) => RunConfig::load(p),
        (None, Command::Selftest) => RunConfig::from_json(SELFTEST_CONFIG),
        (None, _) => {
            eprintln!("error: --config is required for {}", command.name());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let mut cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_OTHER as u8);
        }
    };
    let result = pool.install(|| harness::run(command, &cfg, &out));
    match result {
        Ok(outcome) => {
            if !outcome.message.is_empty() {
                println!("{}", outcome.message);
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code_for(&e) as u8)
        }
    }
}
