use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradlab::config::ExperimentConfig;
use gradlab::harness;
use gradlab::metrics::RankBy;
use gradlab::{io, Error};

#[derive(Parser)]
#[command(name = "gradlab", version, about = "Federated learning gradient leakage experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Split the training data over clients and write partition.json.
    Partition,
    /// Run federated training and write checkpoints plus rounds.csv.
    Fedtrain,
    /// Record one client's update from a checkpoint.
    Capture {
        /// Defaults to checkpoints/round_{capture.round}.gobf in the output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct a client's batch from a captured update.
    Attack {
        #[arg(long)]
        capture: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Private batch, used only for scoring.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Compare two image directories or two tag files.
    Eval {
        #[arg(long, num_args = 2, value_names = ["ORIGINALS", "RECON"], conflicts_with = "tags", required_unless_present = "tags")]
        images: Option<Vec<PathBuf>>,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        tags: Option<Vec<PathBuf>>,
        #[arg(long, value_enum, default_value_t = Rank::Psnr)]
        rank_by: Rank,
    },
    /// Run every cell of the config's sweep grid.
    Sweep,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Rank {
    Psnr,
    Ssim,
    Mse,
}

impl From<Rank> for RankBy {
    fn from(r: Rank) -> Self {
        match r {
            Rank::Psnr => RankBy::Psnr,
            Rank::Ssim => RankBy::Ssim,
            Rank::Mse => RankBy::Mse,
        }
    }
}

struct Run {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
}

fn load(global: &Global) -> gradlab::Result<Run> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    let out = global.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    io::create_dir(&out)?;
    io::write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    Ok(Run {
        cfg,
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        out,
    })
}

fn run(cli: Cli) -> gradlab::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Partition => {
            let r = load(g)?;
            harness::run_partition(&r.cfg, &r.base, &r.out)?;
        }
        Command::Fedtrain => {
            let r = load(g)?;
            let records = harness::run_fedtrain(&r.cfg, &r.base, &r.out)?;
            if let Some(last) = records.last() {
                println!("round {}: test accuracy {:.4}", last.round, last.test_acc);
            }
        }
        Command::Capture { checkpoint } => {
            let r = load(g)?;
            harness::run_capture(&r.cfg, &r.base, &r.out, checkpoint.as_deref())?;
        }
        Command::Attack {
            capture,
            checkpoint,
            ground_truth,
        } => {
            let r = load(g)?;
            let report = harness::run_attack(
                &r.cfg,
                &r.base,
                &r.out,
                &capture,
                checkpoint.as_deref(),
                ground_truth.as_deref(),
            )?;
            if let Some(q) = report.quality {
                println!("psnr {:.3} dB, ssim {:.4}", q.psnr_db.mean, q.ssim.mean);
            }
        }
        Command::Eval { images, tags, rank_by } => {
            if let Some(t) = tags {
                println!("{}", harness::eval_tag_files(&t[0], &t[1])?);
            } else if let Some(d) = images {
                let report = harness::eval_image_dirs(&d[0], &d[1], rank_by.into())?;
                match &g.out {
                    Some(out) => io::write_text(&out.join("metrics.csv"), &report.csv())?,
                    None => print!("{}", report.csv()),
                }
            }
        }
        Command::Sweep => {
            let r = load(g)?;
            harness::run_sweep(&r.cfg, &r.base, &r.out, g.threads)?;
        }
    }
    Ok(())
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRADLAB_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    if cli.global.threads > 0 {
        // the global pool serves the federation's per-client work
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
