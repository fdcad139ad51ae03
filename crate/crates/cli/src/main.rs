use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geonlf_cli::commands::{self, CliError, EvalInputs, GenArgs};
use geonlf_cli::io;
use geonlf_core::scene::Preset;

#[derive(Parser)]
#[command(name = "geonlf", version, about = "Pose-free LiDAR neural fields on synthetic scenes")]
struct Cli {
    /// key=value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides GEONLF_THREADS
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sequence
    Gen {
        #[arg(long, default_value = "corridor")]
        preset: Preset,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 5.0)]
        sigma_rot: f64,
        #[arg(long, default_value_t = 0.1)]
        sigma_trans: f64,
        #[arg(long, default_value_t = 9)]
        holdout_stride: usize,
        #[arg(long, default_value_t = 4)]
        holdout_count: usize,
    },
    /// Pure geometric registration
    Register { data: PathBuf },
    /// Joint field and pose optimization
    Reconstruct {
        data: PathBuf,
        /// Also render training and held-out views
        #[arg(long)]
        render: bool,
    },
    /// Sequential pairwise ICP baseline
    BaselineIcp { data: PathBuf },
    /// Pose (and optionally scan) metrics as CSV
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, requires = "gt_scans")]
        pred_scans: Option<PathBuf>,
        #[arg(long, requires = "pred_scans")]
        gt_scans: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Top-down SVG of trajectories
    Plot { trajs: Vec<PathBuf> },
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| std::env::var("GEONLF_THREADS").ok()?.parse().ok()).filter(|n| *n > 0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let data_dir = match &cli.cmd {
        Cmd::Register { data } | Cmd::Reconstruct { data, .. } | Cmd::BaselineIcp { data } => Some(data.as_path()),
        _ => None,
    };
    let mut cfg = commands::load_config(data_dir, cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    match cli.cmd {
        Cmd::Gen { preset, frames, sigma_rot, sigma_trans, holdout_stride, holdout_count } => {
            let args = GenArgs {
                preset,
                seed: cli.seed.unwrap_or(0),
                frames,
                sigma_rot_deg: sigma_rot,
                sigma_trans,
                holdout_stride,
                holdout_count,
            };
            commands::gen(&args, cli.config.as_deref(), &cli.out)
        }
        Cmd::Register { data } => commands::register(&cfg, &data, &cli.out).map(|_| ()),
        Cmd::Reconstruct { data, render } => commands::reconstruct(&cfg, &data, &cli.out, render).map(|_| ()),
        Cmd::BaselineIcp { data } => commands::baseline_icp(&cfg, &data, &cli.out).map(|_| ()),
        Cmd::Eval { est, reference, pred_scans, gt_scans, threshold } => {
            let row = commands::eval(
                &cfg,
                &EvalInputs {
                    est: &est,
                    reference: &reference,
                    pred_scans: pred_scans.as_deref(),
                    gt_scans: gt_scans.as_deref(),
                    fscore_threshold: threshold,
                },
            )?;
            let csv = io::metrics_csv(&[row]);
            std::fs::create_dir_all(&cli.out).map_err(|e| io::IoError::Io { path: cli.out.clone(), source: e })?;
            io::write_text(&cli.out.join("metrics.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Cmd::Plot { trajs } => {
            if trajs.is_empty() {
                return Err(CliError::Invalid("plot needs at least one trajectory".into()));
            }
            let svg = commands::plot(&trajs)?;
            std::fs::create_dir_all(&cli.out).map_err(|e| io::IoError::Io { path: cli.out.clone(), source: e })?;
            io::write_text(&cli.out.join("plot.svg"), &svg)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = thread_count(cli.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
