use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coin_core::expcli::{self, ExperimentSpec, Overrides, SweepParam};
use coin_core::pipeline::FeatureLayer;
use coin_core::CoinError;

#[derive(Parser)]
#[command(name = "coin", version, about = "Contrastive initialization experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides `out_dir` in the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` in the spec.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of runs executed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out_dir: self.out.clone(),
            seeds: self.seeds.clone(),
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the `[train]` configuration for every seed.
    Run(Common),
    /// Compare methods under an equal epoch budget.
    Compare(Common),
    /// Sweep one hyperparameter (alpha, tau or N).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Write the features of a checkpoint on the test split as CSV.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// `z` (encoder output) or `v` (projection).
        #[arg(long, default_value = "z")]
        layer: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Seed selecting the dataset and split; defaults to the first spec seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn execute(cli: Cli) -> Result<(), CoinError> {
    match cli.command {
        Command::Run(c) => {
            let spec = ExperimentSpec::load(&c.spec)?;
            for r in expcli::cmd_run(spec, &c.overrides())? {
                println!(
                    "{} seed {}: test_acc={:.4} s_dbw={:.4} -> {}",
                    r.config.method,
                    r.config.seed,
                    r.report.final_accuracy,
                    r.report.final_s_dbw.score,
                    r.dir.display()
                );
            }
        }
        Command::Compare(c) => {
            let spec = ExperimentSpec::load(&c.spec)?;
            println!("method        acc_mean  acc_std   s_dbw_mean  s_dbw_std");
            for r in expcli::cmd_compare(spec, &c.overrides())? {
                println!(
                    "{:<12} {:>9.4} {:>8.4} {:>11.4} {:>10.4}",
                    r.label, r.acc.0, r.acc.1, r.s_dbw.0, r.s_dbw.1
                );
            }
        }
        Command::Sweep { common, param, values } => {
            let param: SweepParam = param.parse()?;
            let spec = ExperimentSpec::load(&common.spec)?;
            let table = expcli::cmd_sweep(spec, &common.overrides(), param, &values)?;
            for (i, r) in table.rows.iter().enumerate() {
                let mark = if i == table.argmax { "  <- best" } else { "" };
                println!("{}={:<8} acc={:.4} s_dbw={:.4}{mark}", param.name(), r.value, r.acc.0, r.s_dbw.0);
            }
        }
        Command::DumpFeatures {
            checkpoint,
            spec,
            layer,
            out,
            seeds,
        } => {
            let layer: FeatureLayer = layer.parse()?;
            let spec = ExperimentSpec::load(&spec)?;
            let seed = match seeds.as_deref() {
                Some([s, ..]) => *s,
                Some([]) => return Err(CoinError::Validation {
                    field: "--seeds".into(),
                    message: "empty seed list".into(),
                }),
                None => spec.seeds[0],
            };
            let dump = expcli::cmd_dump_features(&checkpoint, &spec, seed, layer, &out)?;
            println!("{} rows x {} features, s_dbw={:.6} -> {}", dump.rows, dump.cols, dump.s_dbw.score, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
