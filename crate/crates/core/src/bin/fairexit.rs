use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairexit::cli::{
    cmd_compare, cmd_dump_features, cmd_generate_data, cmd_probe, cmd_sweep, cmd_train,
    format_compare_table, format_probe_table, load_split_dir, write_sweep_csv, ExperimentConfig,
};
use fairexit::dataset::{load_csv, CsvSchema, DatasetSpec};
use fairexit::inference::theta_grid;
use fairexit::model::{MultiExitNet, ProbeConfig};
use fairexit::{Error, Result};

#[derive(Parser)]
#[command(name = "fairexit", version, about = "Fairness-oriented multi-exit classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test CSVs of the synthetic biased data.
    GenerateData {
        /// TOML dataset spec; flags below override its fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bias_corr: Option<f64>,
        #[arg(long)]
        leak_strength: Option<f64>,
        #[arg(long)]
        imbalance_level: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of an experiment config into a fresh run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed list.
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train fresh heads on each frozen block and print layer, accuracy, EO, DP.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with train.csv, val.csv and test.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Early-exit frontier over an evenly spaced θ grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side EO/accuracy of trained configs, in the order given.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
    },
    /// Per-exit features as TSV for external plotting.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One CSV file in the dataset schema.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            spec,
            seed,
            bias_corr,
            leak_strength,
            imbalance_level,
            out,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => DatasetSpec::default(),
            };
            s.seed = seed.unwrap_or(s.seed);
            s.bias_corr = bias_corr.unwrap_or(s.bias_corr);
            s.leak_strength = leak_strength.unwrap_or(s.leak_strength);
            s.imbalance_level = imbalance_level.unwrap_or(s.imbalance_level);
            let split = cmd_generate_data(&s, &out)?;
            println!(
                "wrote {} / {} / {} instances to {}",
                split.train.len(),
                split.val.len(),
                split.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            seeds,
            output_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let run = cmd_train(&cfg)?;
            print!("{}", fs::read_to_string(run.run_dir.join("report.txt")).unwrap_or_default());
            println!("run directory: {}", run.run_dir.display());
        }
        Command::Probe {
            checkpoint,
            data,
            groups,
            epochs,
            seed,
            out,
        } => {
            let n_classes = MultiExitNet::load_checkpoint(&checkpoint)?.config().n_classes;
            let split = load_split_dir(&data, CsvSchema { n_classes, n_groups: groups })?;
            let defaults = ProbeConfig::default();
            let cfg = ProbeConfig {
                epochs: epochs.unwrap_or(defaults.epochs),
                seed: seed.unwrap_or(defaults.seed),
                ..defaults
            };
            let outcome = cmd_probe(&checkpoint, &split, &cfg)?;
            output(out.as_ref())?
                .write_all(format_probe_table(&outcome).as_bytes())
                .map_err(|e| Error::Input(e.to_string()))?;
        }
        Command::Sweep {
            checkpoint,
            data,
            groups,
            points,
            out,
        } => {
            let net = MultiExitNet::load_checkpoint(&checkpoint)?;
            let schema = CsvSchema {
                n_classes: net.config().n_classes,
                n_groups: groups,
            };
            let split = load_split_dir(&data, schema)?;
            let (rows, selected) = cmd_sweep(&net, &split, &theta_grid(points))?;
            write_sweep_csv(&out, &rows, selected)?;
            if let Some(i) = selected {
                let r = &rows[i];
                println!("selected theta {} (test acc {:.2}, eo {:.2})", r.theta, r.accuracy, r.eo);
            }
        }
        Command::Compare { configs } => {
            let cfgs = configs
                .iter()
                .map(ExperimentConfig::load)
                .collect::<Result<Vec<_>>>()?;
            print!("{}", format_compare_table(&cmd_compare(&cfgs)?));
        }
        Command::DumpFeatures {
            checkpoint,
            data,
            groups,
            out,
        } => {
            let net = MultiExitNet::load_checkpoint(&checkpoint)?;
            let schema = CsvSchema {
                n_classes: net.config().n_classes,
                n_groups: groups,
            };
            let rows = load_csv(&data, schema)?;
            let mut w = output(out.as_ref())?;
            cmd_dump_features(&net, &rows, &mut w)?;
            w.flush().map_err(|e| Error::Input(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fairexit: error: {e}");
            ExitCode::FAILURE
        }
    }
}
