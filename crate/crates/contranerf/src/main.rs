use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contranerf::commands::{self, default_report_path, parse_yaw_range, summary};
use contranerf::config::{Override, RunConfig};
use contranerf::error::EXIT_USAGE;
use contranerf::Result;
use contranerf_core::metrics::{EvalOptions, MetricSelection};

#[derive(Parser)]
#[command(
    name = "contranerf",
    version,
    about = "Pose-free 3D-aware GAN training on synthetic multi-view data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write ckpt, metrics.jsonl and config.snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration value, e.g. `--set loss.tau=0.5`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint of the same variant.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print every n-th step to stderr (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Render yaw sweeps with the EMA generator.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Yaw offsets in degrees around the prior mean, `LO:HI`.
        #[arg(long, default_value = "-40:40", allow_hyphen_values = true)]
        yaw: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for a checkpoint against a dataset directory or image folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of fid, pr, depth_fd, embedding, or `all`.
        #[arg(long, default_value = "all")]
        metrics: String,
        #[arg(long, default_value_t = EvalOptions::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = EvalOptions::default().k)]
        k: usize,
        /// Poses in the embedding-diagnostics grid; half train the linear probe.
        #[arg(long, default_value_t = EvalOptions::default().diag_poses)]
        diag_poses: usize,
        /// Latents rendered per diagnostics pose.
        #[arg(long, default_value_t = EvalOptions::default().diag_latents)]
        diag_latents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to eval.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset described by a configuration.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
}

fn parse_metrics(s: &str) -> Result<MetricSelection> {
    if s == "all" {
        return Ok(MetricSelection::ALL);
    }
    let mut sel = MetricSelection {
        fid: false,
        precision_recall: false,
        depth_fd: false,
        embedding: false,
    };
    for m in s.split(',').map(str::trim) {
        match m {
            "fid" => sel.fid = true,
            "pr" | "precision_recall" => sel.precision_recall = true,
            "depth_fd" => sel.depth_fd = true,
            "embedding" => sel.embedding = true,
            other => {
                return Err(contranerf::AppError::Config(format!(
                    "--metrics: unknown metric `{other}`"
                )))
            }
        }
    }
    Ok(sel)
}

fn overrides(set: &[String]) -> Result<Vec<Override>> {
    set.iter().map(|s| Override::parse(s)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            set,
            resume,
            log_every,
        } => {
            let o = overrides(&set)?;
            let cfg = RunConfig::load(&config, &o)?;
            let outcome = commands::train(&cfg, &o, &out, resume.as_deref(), |m| {
                if log_every > 0 && (m.step % log_every == 0 || m.step + 1 == cfg.train.steps) {
                    eprintln!(
                        "step {} loss_D {:.4} loss_G {:.4} real {:.3} fake {:.3}",
                        m.step, m.loss_d, m.loss_g, m.real_logit_mean, m.fake_logit_mean
                    );
                }
            })?;
            println!(
                "trained {} steps into {}",
                outcome.state.step,
                out.display()
            );
        }
        Command::Sweep {
            checkpoint,
            yaw,
            steps,
            count,
            seed,
            out,
        } => {
            let (lo, hi) = parse_yaw_range(&yaw)?;
            let metas = commands::sweep(&checkpoint, lo, hi, steps, count, seed, &out)?;
            println!(
                "wrote {} sweeps of {steps} frames to {}",
                metas.len(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            metrics,
            samples,
            k,
            diag_poses,
            diag_latents,
            seed,
            out,
        } => {
            let opts = EvalOptions {
                metrics: parse_metrics(&metrics)?,
                samples,
                k,
                diag_poses,
                diag_latents,
                seed,
            };
            let path = out.unwrap_or_else(|| default_report_path(&checkpoint));
            let report = commands::eval(&checkpoint, &dataset, &opts, &path)?;
            for r in &report.refused {
                eprintln!("{r}");
            }
            println!("{}", summary(&report));
        }
        Command::MakeData {
            config,
            out,
            set,
            scenes,
            views,
            force,
        } => {
            let o = overrides(&set)?;
            let mut cfg = RunConfig::load(&config, &o)?;
            cfg.data.scenes = scenes.unwrap_or(cfg.data.scenes);
            cfg.data.views = views.unwrap_or(cfg.data.views);
            if cfg.data.scenes == 0 || cfg.data.views == 0 {
                return Err(contranerf::AppError::Config(
                    "--scenes and --views must be at least 1".into(),
                ));
            }
            let m = commands::make_data(&cfg, &out, force)?;
            println!(
                "wrote {} records to {} (sha256 {})",
                m.records,
                out.display(),
                m.sha256
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
