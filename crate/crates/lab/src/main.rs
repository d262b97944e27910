use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ancon_lab::experiment::{self, RunOptions};
use ancon_lab::verify::{self, Fault};
use ancon_lab::{io, report, ExperimentConfig, LabError, LabResult};
use clap::{Args, Parser, Subcommand};

/// Self-training under distribution shift with confidence-anchored pseudo labels.
#[derive(Parser)]
#[command(name = "ancon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output root [default: config `output`, then $ANCON_OUTPUT_ROOT, then ./ancon-out]
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and shifted target datasets as CSV.
    Generate(Common),
    /// Train the source model of every seed.
    TrainSource(Common),
    /// Run the adaptation grid; interrupted runs resume, finished runs are skipped.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Check the concentration and neighborhood guarantees numerically.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Aggregate finished runs over seeds into table.csv and series.csv.
    Report(Common),
}

fn setup(common: &Common) -> LabResult<(ExperimentConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(LabError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::Config(e.to_string()))?;
    }
    let out = cfg.output_dir(common.output.as_deref());
    Ok((cfg, out))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> LabResult<()> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = setup(&common)?;
            let manifest = experiment::generate_data(&cfg, &out)?;
            println!(
                "wrote {} files under {}",
                manifest.files.len(),
                out.join("data").display()
            );
        }
        Command::TrainSource(common) => {
            let (cfg, out) = setup(&common)?;
            let (sources, warnings) = experiment::train_sources(&cfg, &out)?;
            warn_all(&warnings);
            for (seed, params) in &sources {
                let source = experiment::source_domain(&cfg, *seed)?;
                let acc = ancon_core::selftrain::evaluate_accuracy(params, &source)?;
                println!("seed {seed}: source accuracy {:.4}", acc);
            }
        }
        Command::Adapt {
            common,
            stop_after_epochs,
        } => {
            let (cfg, out) = setup(&common)?;
            let report = experiment::run_grid(&cfg, &out, RunOptions { stop_after_epochs })?;
            warn_all(&report.warnings);
            println!(
                "{} runs: {} completed ({} skipped, {} resumed), {} incomplete; results in {}",
                report.runs,
                report.summaries.len(),
                report.skipped,
                report.resumed,
                report.incomplete,
                out.display()
            );
        }
        Command::Verify { common, inject_fault } => {
            let (cfg, out) = setup(&common)?;
            let checks = verify::run(&cfg.verify, inject_fault)?;
            io::ensure_dir(&out)?;
            let path = out.join("verify.csv");
            verify::write_csv(&path, &checks)?;
            print!("{}", verify::summary(&checks));
            println!("details in {}", path.display());
            let failed = verify::failures(&checks);
            if failed > 0 {
                return Err(LabError::VerificationFailed {
                    failed,
                    total: checks.len(),
                });
            }
        }
        Command::Report(common) => {
            let (_, out) = setup(&common)?;
            if !Path::new(&out).exists() {
                return Err(LabError::Config(format!("{} does not exist", out.display())));
            }
            print!("{}", report::write_report(&out)?);
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
