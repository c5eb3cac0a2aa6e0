use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zocertify::experiment::{self, ExperimentConfig, Method, Overrides, METHOD_MATRIX};
use zocertify::zo::Estimator;
use zocertify::Error;

#[derive(Parser)]
#[command(name = "zocertify", version, about = "Black-box denoised smoothing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier that becomes the black box.
    TrainTarget(Common),
    /// Train a denoiser (and autoencoder) in front of the black box.
    Defend {
        #[command(flatten)]
        common: Common,
        /// zo-ruds, zo-ae-ruds or fo-ds.
        #[arg(long)]
        method: String,
        /// rge or cge; defaults to the configured estimator.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Certify the test split under a defence.
    Certify {
        #[command(flatten)]
        common: Common,
        /// `identity` or a defend run name such as zo-ruds-rge.
        #[arg(long, default_value = "identity")]
        defense: String,
    },
    /// Run the finite-difference and estimator checks.
    Gradcheck {
        /// Accepted for interface symmetry; only the output directory and
        /// thread cap are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate every certified defence of a run directory.
    Report(Common),
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn set_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(k) = threads {
        if k == 0 {
            return Err(Error::Validation(vec!["--threads must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    set_threads(common.threads)?;
    ExperimentConfig::load(
        &common.config,
        &Overrides {
            seed: common.seed,
            out_dir: common.out.clone(),
        },
    )
}

fn parse_method(method: &str, estimator: Option<&str>) -> Result<(Method, Option<Estimator>), Error> {
    let m = Method::parse(method);
    let e = estimator.map(|s| match s {
        "rge" => Some(Estimator::Rge),
        "cge" => Some(Estimator::Cge),
        _ => None,
    });
    match (m, e) {
        (Some(m), None) => Ok((m, None)),
        (Some(m), Some(Some(e))) => Ok((m, Some(e))),
        _ => Err(Error::Validation(vec![format!(
            "unknown method/estimator {method:?}/{}; valid pairs:\n{METHOD_MATRIX}",
            estimator.unwrap_or("-")
        )])),
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::TrainTarget(common) => {
            let cfg = load(&common)?;
            let s = experiment::train_target(&cfg)?;
            println!(
                "classifier written to {} (train accuracy {:.4}, test accuracy {:.4})",
                s.dir.display(),
                s.train_accuracy,
                s.test_accuracy
            );
        }
        Command::Defend {
            common,
            method,
            estimator,
        } => {
            let (method, estimator) = parse_method(&method, estimator.as_deref())?;
            let cfg = load(&common)?;
            let s = experiment::defend(&cfg, method, estimator)?;
            println!(
                "{} written to {} ({} steps, {} training queries, {} reference queries)",
                s.run,
                s.dir.display(),
                s.report.steps,
                s.report.training_queries,
                s.report.reference_queries
            );
        }
        Command::Certify { common, defense } => {
            let cfg = load(&common)?;
            let s = experiment::certify(&cfg, &defense)?;
            for p in &s.curve {
                println!("r = {:<6} certified accuracy {:.4}", p.radius, p.certified_accuracy);
            }
            println!("{} certification queries; outputs in {}", s.queries, s.dir.display());
        }
        Command::Gradcheck {
            config,
            seeds,
            threads,
            out,
        } => {
            set_threads(threads)?;
            let out_dir = match (out, config) {
                (Some(o), _) => o,
                (None, Some(c)) => ExperimentConfig::load(&c, &Overrides::default())?.out_dir,
                (None, None) => PathBuf::from("out"),
            };
            let s = experiment::gradcheck(&out_dir, seeds.max(1))?;
            for o in &s.outcomes {
                println!(
                    "{:<24} {:<4} max_error {:.3e} (tol {:.0e}){}",
                    o.name,
                    if o.passed { "ok" } else { "FAIL" },
                    o.max_error,
                    o.tolerance,
                    o.failure.as_deref().map(|f| format!(" {f}")).unwrap_or_default()
                );
            }
            println!("report written to {}", s.dir.join("report.csv").display());
            return Ok(s.passed());
        }
        Command::Report(common) => {
            let cfg = load(&common)?;
            let (dir, report) = experiment::write_report(&cfg.out_dir)?;
            print!("{}", report.render());
            println!("report written to {}", dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
