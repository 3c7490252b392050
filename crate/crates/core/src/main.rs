use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regcert::cli;
use regcert::config::ExperimentConfig;
use regcert::Error;

#[derive(Parser)]
#[command(name = "regcert", version, about = "Perturbation-based registration uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a source image, a warped target, and the ground-truth transform.
    SimulatePair {
        #[command(flatten)]
        common: Common,
        /// Use this NIfTI-1 (or RCV1) volume instead of a phantom.
        #[arg(long)]
        import_nifti: Option<PathBuf>,
    },
    /// Register the pair and estimate the uncertainty map.
    Estimate(Common),
    /// Score the uncertainty map against the ground-truth error.
    Evaluate(Common),
    /// Run the oracle covariance and MSE checks.
    LemmaCheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the resolved config and results to stderr.
    #[arg(long)]
    debug: bool,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolve()?;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if common.debug {
        eprintln!("{}", serde_json::to_string_pretty(&cfg)?);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SimulatePair { common, import_nifti } => {
            let cfg = load(&common)?;
            let gt = cli::cmd_simulate_pair(&cfg, &common.out, import_nifti.as_deref())?;
            if common.debug {
                eprintln!("ground truth {:?} after {} attempt(s)", gt.kind, gt.ground_truth.attempts);
            }
        }
        Command::Estimate(common) => {
            let cfg = load(&common)?;
            let s = cli::cmd_estimate(&cfg, &common.out)?;
            if common.debug {
                eprintln!("{}", serde_json::to_string_pretty(&s)?);
            }
        }
        Command::Evaluate(common) => {
            let cfg = load(&common)?;
            let s = cli::cmd_evaluate(&cfg, &common.out)?;
            if common.debug {
                eprintln!("{}", serde_json::to_string_pretty(&s)?);
            }
        }
        Command::LemmaCheck(common) => {
            let cfg = load(&common)?;
            let r = cli::cmd_lemma_check(&cfg, &common.out)?;
            for e in &r.lemma {
                if let Some(note) = &e.note {
                    eprintln!("{:?}: {note}", e.report.family);
                }
            }
            if !r.pass {
                return Err(Error::CheckFailed(format!("see {}", common.out.join(cli::LEMMA_JSON).display())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
