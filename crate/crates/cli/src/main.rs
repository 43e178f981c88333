use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m3t::harness::{self, Dataset, ExperimentConfig, HarnessError};
use m3t::lob_data::{day_file_paths, write_day};
use m3t::macro_trader::write_profiles_csv;

#[derive(Parser)]
#[command(name = "m3t", version, about = "Hierarchical VWAP execution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value experiment file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["m3t", "dqn", "ddqn", "vwap", "ap"])]
    agent: Option<String>,
    #[arg(long, value_parser = ["sparse", "dense"])]
    reward: Option<String>,
    /// Extra overrides, e.g. `--set episodes=100`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_kv(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.agent {
            cfg.set("agent", a)?;
        }
        if let Some(r) = &self.reward {
            cfg.set("reward", r)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::ConfigInvalid(format!("override {kv:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic days as replay CSV files
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Realized 8-tranche volume profiles of every day
    Profiles {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the profile estimators and write their test MSE table
    TrainMacro {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a learning agent; writes checkpoints and a learning curve
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute the parent order on every test day
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`; required for learning agents
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge backtest results into report tables
    Report {
        /// results.json files or directories containing one
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn results_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("results.json")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let data = Dataset::load(&cfg)?;
            fs::create_dir_all(&out)?;
            for day in &data.days {
                let (snap, trades) = day_file_paths(&out, day.day_id);
                write_day(day, &snap, &trades)?;
            }
            println!("wrote {} days to {}", data.days.len(), out.display());
        }
        Command::Profiles { common, out } => {
            let data = Dataset::load(&common.load()?)?;
            let rows: Vec<_> = data.days.iter().map(|d| d.day_id).zip(data.profiles()?).collect();
            write_profiles_csv(fs::File::create(&out)?, &rows)?;
            println!("wrote {} profiles to {}", rows.len(), out.display());
        }
        Command::TrainMacro { common, out } => {
            let cfg = common.load()?;
            let rows = harness::run_macro_study(&cfg, &Dataset::load(&cfg)?)?;
            fs::create_dir_all(&out)?;
            let table = harness::mse_table(&rows);
            fs::write(out.join("mse.csv"), &table)?;
            print!("{table}");
        }
        Command::Train { common, out } => {
            let s = harness::run_training(&common.load()?, &out)?;
            let last = s.episodes.last().expect("at least one episode");
            println!(
                "{} seed {}: {} episodes, last slippage {:.2} bp, macro test MSE {:.3e}",
                s.agent.label(),
                s.seed,
                s.episodes.len(),
                last.slippage_bp,
                s.macro_test_mse
            );
        }
        Command::Backtest { common, checkpoint, out } => {
            let r = harness::run_backtest(&common.load()?, checkpoint.as_deref(), &out)?;
            println!("{} {}: {} bp over {} days", r.strategy.label(), r.stock, r.cell(), r.days.len());
        }
        Command::Report { inputs, out } => {
            let reports = inputs
                .iter()
                .map(|p| harness::load_report(&results_path(p)))
                .collect::<Result<Vec<_>, _>>()?;
            for p in harness::emit_report(&reports, &out)? {
                println!("{}", p.display());
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
            ExitCode::FAILURE
        }
    }
}
