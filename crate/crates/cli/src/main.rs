use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ubb_lio::evaluation::AilMode;
use ubb_lio_cli::{self as cli, CliError, EvalArgs};

#[derive(Parser)]
#[command(name = "ubb-lio", version, about = "LiDAR-inertial odometry with deterministic protection levels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an episode and write it as a dataset directory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory [default: <output dir>/dataset]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the odometry on a dataset directory.
    Run {
        /// Dataset directory [default: <output dir>/dataset]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Result directory [default: <output dir>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute CR, AIL, ATE and the end-to-end error.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        protection: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Rigidly align the estimate before ATE.
        #[arg(long)]
        align: bool,
        /// Report AIL as 6 sqrt(P_ii) instead of 2 sqrt(P_ii).
        #[arg(long)]
        three_sigma: bool,
        /// Timestamp association tolerance, s.
        #[arg(long, default_value_t = 0.01)]
        assoc_tol: f64,
        /// Method name in the table row.
        #[arg(long, default_value = "ubb-lio")]
        name: String,
    },
    /// Write per-axis error/protection plots and a top view as SVG.
    Plot {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        protection: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        assoc_tol: f64,
    },
    /// Convert an `x,y,z` cloud into a range-bearing scan file.
    Convert {
        #[arg(long)]
        xyz: PathBuf,
        /// Scan timestamp, s.
        #[arg(long)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { config, out, seed } => {
            let mut cfg = cli::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            let s = cli::simulate(&cfg, &out)?;
            println!("wrote {} imu rows and {} scans to {}", s.imu_rows, s.scans, out.display());
        }
        Command::Run { data, config, out } => {
            let cfg = cli::load_config(config.as_deref())?;
            let data = data.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let result = cli::run(&cfg, &data, &out)?;
            println!("{}", cli::run_summary(&result));
            println!("results in {}", out.display());
        }
        Command::Eval { est, protection, gt, align, three_sigma, assoc_tol, name } => {
            let mut args = EvalArgs::new(est, protection, gt);
            args.options.align = align;
            args.options.assoc_tol = assoc_tol;
            args.options.ail_mode = if three_sigma { AilMode::ThreeSigma } else { AilMode::Deterministic };
            let report = cli::eval(&args)?;
            print!("{}", report.to_text());
            println!("{}", report.table_row(&name));
        }
        Command::Plot { est, protection, gt, out, assoc_tol } => {
            for p in cli::plot(&est, &protection, &gt, &out, assoc_tol)? {
                println!("{}", p.display());
            }
        }
        Command::Convert { xyz, time, out } => {
            let n = cli::convert(&xyz, time, &out)?;
            println!("wrote {n} points to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
