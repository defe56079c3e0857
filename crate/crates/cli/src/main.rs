use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use landau_lab::orchestration::{
    exit_code_for, load_config, run_experiment, ExperimentConfig, ExperimentKind, Overrides,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "landau-lab", version, about = "Particle Monte Carlo lab for the Landau SDE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system and write snapshots and moment series.
    Simulate(RunArgs),
    /// Covariance spectrum bounds and step-size scaling of the scheme.
    AnalyzeScheme(RunArgs),
    /// Kernel density estimates of the tagged particle.
    EstimateDensity(RunArgs),
    /// Density sandwich, tail bound and quadratic-variation checks.
    VerifyBounds(RunArgs),
    /// Weak-form identities and replica-averaged moment balances.
    CheckMoments(RunArgs),
    /// Every pipeline above on shared trajectories.
    FullSuite(RunArgs),
    /// Print the default configuration for an experiment as TOML.
    DefaultConfig {
        #[arg(default_value = "full-suite")]
        experiment: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
}

fn execute(kind: ExperimentKind, args: RunArgs) -> i32 {
    let cfg = match &args.config {
        Some(path) => load_config(path),
        None => Ok(ExperimentConfig::maxwellian(kind)),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let overrides = Overrides {
        experiment: Some(kind),
        seed: args.seed,
        output_dir: args.out,
        strict: args.strict,
        workers: args.workers,
        replicas: args.replicas,
    };
    if let Err(e) = cfg.apply(&overrides) {
        eprintln!("error: {e}");
        return exit_code_for(&e);
    }
    match run_experiment(&cfg) {
        Ok(m) => {
            for c in &m.checks {
                println!("{:<28} {:?}", c.name, c.status);
            }
            if let Some(e) = &m.error {
                eprintln!("error: {e}");
            }
            println!("manifest: {}", cfg.output_dir.join("manifest.json").display());
            m.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Simulate(a) => execute(ExperimentKind::Simulate, a),
        Command::AnalyzeScheme(a) => execute(ExperimentKind::AnalyzeScheme, a),
        Command::EstimateDensity(a) => execute(ExperimentKind::EstimateDensity, a),
        Command::VerifyBounds(a) => execute(ExperimentKind::VerifyBounds, a),
        Command::CheckMoments(a) => execute(ExperimentKind::CheckMoments, a),
        Command::FullSuite(a) => execute(ExperimentKind::FullSuite, a),
        Command::DefaultConfig { experiment } => match ExperimentKind::parse(&experiment)
            .and_then(|k| ExperimentConfig::maxwellian(k).to_toml())
        {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
    };
    ExitCode::from(code as u8)
}
