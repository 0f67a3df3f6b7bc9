use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gafl_core::harness::{
    ablate, dump_spectrum, load_filter, run_experiment, ExperimentConfig, Split,
};

#[derive(Parser)]
#[command(
    name = "gafl-lab",
    version,
    about = "Train and compare models with a learned Fourier filter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model as configured.
    Run(RunArgs),
    /// Train the configured model with and without the filter.
    Ablate(RunArgs),
    /// Write the learned filter of a checkpoint as a PGM image.
    DumpSpectrum {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(self) -> gafl_core::Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(&self.config)?.with_overrides(
            self.seed,
            self.epochs,
            self.out_dir,
        ))
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gafl-lab: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> gafl_core::Result<()> {
    match command {
        Command::Run(args) => {
            let report = run_experiment(&args.load()?)?;
            let last = report.records.iter().filter(|r| {
                r.split == Split::Val && r.epoch == report.records.last().map_or(0, |l| l.epoch)
            });
            for r in last {
                println!(
                    "val {}={:.6} loss={:.6}",
                    r.metric_name, r.metric_value, r.loss
                );
            }
            println!("params {}", report.model.param_count());
            println!("wrote {}", report.output_dir.display());
        }
        Command::Ablate(args) => {
            let report = ablate(&args.load()?)?;
            print!("{}", report.summary());
        }
        Command::DumpSpectrum { ckpt, out } => {
            let filter = load_filter(&ckpt)?;
            dump_spectrum(&filter, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
