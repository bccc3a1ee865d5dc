use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use multichart::density::DensityMode;
use multichart::datasets::{load_dataset, read_points_csv};
use multichart_cli::plot::{self, Projection};
use multichart_cli::{eval_cmd, generate, open_checkpoint, resolve_config, sample_cmd, train_cmd, write_report};

#[derive(Parser)]
#[command(name = "mcf", version, about = "Multi-chart flows: learn manifolds and densities on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load and split) a dataset and write it to a directory.
    Generate {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training phases and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: String,
        /// Dataset directory from `generate`; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw ambient samples from a trained model into a CSV file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'n', default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Density modes to report; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<DensityMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a dataset scatter or a model density plot to PNG.
    Plot {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or points CSV to scatter.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        projection: Projection,
        #[arg(long, default_value = "exact")]
        mode: DensityMode,
        /// Samples drawn for 3-D model scatters.
        #[arg(long, default_value_t = 20000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image height in pixels.
        #[arg(long, default_value_t = 400)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MCF_NUM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MCF_NUM_THREADS=`{v}` is not a thread count"))?;
        if n == 0 {
            bail!("MCF_NUM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            generate(&cfg, &out)?;
        }
        Command::Train { config, data, seed, out } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let state = train_cmd(&cfg, data.as_deref(), &out)?;
            if let Some(v) = state.best_val_recon {
                log::info!("best validation reconstruction error {v:.6}");
            }
            if let Some(v) = state.best_val_nll {
                log::info!("best validation latent NLL {v:.6}");
            }
        }
        Command::Sample { checkpoint, n, seed, out } => sample_cmd(&checkpoint, n, seed, &out)?,
        Command::Eval { checkpoint, data, mode, seed, out } => {
            let report = eval_cmd(&checkpoint, &data, &mode, seed)?;
            write_report(&report, out.as_deref())?;
        }
        Command::Plot { checkpoint, data, projection, mode, n, seed, size, out } => {
            let img = match (checkpoint, data) {
                (Some(dir), _) => {
                    let ckpt = open_checkpoint(&dir)?;
                    match projection {
                        Projection::Scatter3d => plot::density_scatter(&ckpt.model, n, seed, mode, size)?,
                        _ => plot::density_map(&ckpt.model, projection, mode, size)?,
                    }
                }
                (None, Some(path)) => {
                    let points = if path.is_dir() {
                        load_dataset(&path)?.train
                    } else {
                        let file = std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                        read_points_csv(std::io::BufReader::new(file))?
                    };
                    plot::scatter(&points, None, projection, size)?
                }
                (None, None) => bail!("plot needs --checkpoint or --data"),
            };
            plot::save_png(&img, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
