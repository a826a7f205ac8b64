use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dscnet::verify::{Suite, DEFAULT_EPS, DEFAULT_TOL};
use dscnet_cli::{CliError, RunConfig};

/// Dynamic skip connection U-Net: synthesis, training, evaluation,
/// gradient checks and ablations.
#[derive(Parser)]
#[command(name = "dscnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `<out_dir>/data`.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and write the checkpoint, metrics.json and loss_curve.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Central-difference gradient checks; exits 1 on any failure.
    Gradcheck {
        /// Defaults to every suite.
        #[arg(long, value_enum)]
        module: Option<Module>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Skip mode × kernel strategy grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    Ops,
    Dmsk,
    Ttt,
    Unet,
}

impl From<Module> for Suite {
    fn from(m: Module) -> Self {
        match m {
            Module::Ops => Suite::Ops,
            Module::Dmsk => Suite::Dmsk,
            Module::Ttt => Suite::Ttt,
            Module::Unet => Suite::Unet,
        }
    }
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config } => {
            let cfg = RunConfig::load(&config)?;
            let files = dscnet_cli::synth(&cfg)?;
            eprintln!("wrote {} files under {}", files.len(), cfg.data_dir().display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = dscnet_cli::train(&cfg)?;
            eprintln!(
                "dice {:.4}, loss {:.4} -> {:.4} in {:.1}s",
                report.final_eval.scores.dice, report.initial_loss, report.final_eval.loss, report.wall_time_s
            );
        }
        Command::Eval { config, ckpt } => {
            let cfg = RunConfig::load(&config)?;
            print_json(&dscnet_cli::eval(&cfg, &ckpt)?)?;
        }
        Command::Gradcheck { module, tol, eps } => {
            let reports = dscnet_cli::gradcheck(module.map(Suite::from), eps, tol)?;
            print_json(&reports)?;
            let failed: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.suite.name()).collect();
            if !failed.is_empty() {
                return Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            let rows = dscnet_cli::ablate(&cfg)?;
            eprintln!("{} cells written to {}", rows.len(), cfg.out_dir.join("ablation.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("DSCNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dscnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
