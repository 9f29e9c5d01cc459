use clap::{Parser, Subcommand};
use failcast_cli::{cmd_evaluate, cmd_experiment, cmd_predict, cmd_simulate, cmd_train, parse_mode, CliError, ExperimentConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "failcast", version, about = "Simulate, train and evaluate the failure predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate normal and failing traces with ground-truth manifests.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Validate the configuration and print the plan without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train a bundle on a normal trace.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a verdict stream for one trace.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// One of e, a, ensemble, loud.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        loud_n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score verdict files; several files are reduced to their median.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        verdicts: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulate, train, predict and evaluate end to end.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a bundle from an earlier run when its training settings match.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("PREVENT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Usage(format!("PREVENT_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { config, seed, out, dry_run } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let sim = cmd_simulate(&cfg, &out, dry_run)?;
            print!("{}", sim.description);
            if !dry_run {
                println!("wrote {} traces to {}", sim.traces.len(), out.display());
            }
        }
        Command::Train { config, seed, trace, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let bundle = cmd_train(&cfg, &trace, &out)?;
            println!("bundle for {} KPIs written to {}", bundle.catalog().len(), out.display());
        }
        Command::Predict { bundle, trace, mode, loud_n, out } => {
            let mode = parse_mode(&mode, loud_n)?;
            let n = cmd_predict(&bundle, &trace, mode, &out)?;
            println!("{n} verdicts written to {}", out.display());
        }
        Command::Evaluate { verdicts, manifest, experiment, out } => {
            let r = cmd_evaluate(&verdicts, &manifest, experiment.as_deref(), &out)?;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into());
            println!(
                "{} {}: far {}%, horizon {}, reaction {}, earliness {}, tpr {}%",
                r.experiment,
                r.source,
                show(r.far_pct),
                show(r.injection_min),
                show(r.reaction_min),
                show(r.earliness_min),
                show(r.tpr_pct)
            );
        }
        Command::Experiment { config, seed, out, resume, dry_run } => {
            let cfg = load_config(config.as_deref(), seed)?;
            if dry_run {
                let sim = cmd_simulate(&cfg, &out.join("traces"), true)?;
                print!("{}", sim.description);
                return Ok(());
            }
            let outcome = cmd_experiment(&cfg, &out, resume)?;
            if outcome.resumed {
                println!("reused the bundle in {}", out.join("bundle").display());
            }
            print!("{}", outcome.summary);
            println!("metrics written to {}", out.join("metrics.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
