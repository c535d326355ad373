//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure, 4 failed verification, 1 anything else.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use otcycle_core::config::ExperimentConfig;
use otcycle_core::data::{generate, save_scene_set, DatasetMeta};
use otcycle_core::error::{Error, Result};
use otcycle_core::experiment::{evaluate_checkpoint, run_experiment, verify_ot, MetricKind};
use otcycle_core::plot::plot_run;

#[derive(Parser)]
#[command(
    name = "otcycle",
    version,
    about = "Unpaired inverse-problem reconstruction with transport-certified cycle-consistent adversarial training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the transport sandwich bounds on random discrete instances,
    /// one JSON line per certificate.
    VerifyOt {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        max_points: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fabricate train/test datasets from a config's dataset and forward
    /// sections.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the config; emits checkpoints, a loss log, and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpointed generator against a persisted dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of psnr,ssim,frc.
        #[arg(long, default_value = "psnr,ssim")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves, triptychs, and the ring-correlation curve of a
    /// finished run.
    Plot {
        manifest: PathBuf,
    },
    /// Full pipeline: generate, train, evaluate, write the run manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(
    path: &PathBuf,
    variant: Option<String>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(v) = variant {
        cfg.experiment.variant = v;
    }
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VerifyOt {
            instances,
            max_points,
            dim,
            seed,
        } => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            let summary = verify_ot(instances, max_points, dim, seed, &mut lock)?;
            lock.flush()?;
            eprintln!(
                "verified {} instances, {} failures",
                summary.instances, summary.failures
            );
            if !summary.all_ok {
                return Err(Error::Verification(format!(
                    "{} of {} certificates violated the bounds",
                    summary.failures, summary.instances
                )));
            }
            Ok(())
        }
        Command::GenerateData { spec, seed, out } => {
            let cfg = load_config(&spec, None, seed)?;
            let seeds = cfg.seeds();
            let fwd = cfg.data_forward_operator(&seeds)?;
            let hash = cfg.content_hash();
            let train_set = generate(
                &cfg.scene_spec(cfg.dataset.count),
                fwd.as_ref(),
                seeds.data,
                false,
            )?;
            let test_set = generate(
                &cfg.scene_spec(cfg.dataset.test_count),
                fwd.as_ref(),
                seeds.test_data,
                true,
            )?;
            save_scene_set(
                &out.join("train"),
                &train_set,
                &DatasetMeta {
                    scene: cfg.scene_spec(cfg.dataset.count),
                    seed: seeds.data,
                    normalization: cfg.dataset.normalization,
                    spec_hash: hash.clone(),
                    has_frc_pair: false,
                },
            )?;
            save_scene_set(
                &out.join("test"),
                &test_set,
                &DatasetMeta {
                    scene: cfg.scene_spec(cfg.dataset.test_count),
                    seed: seeds.test_data,
                    normalization: cfg.dataset.normalization,
                    spec_hash: hash,
                    has_frc_pair: true,
                },
            )?;
            println!("wrote {} and {}", out.join("train").display(), out.join("test").display());
            Ok(())
        }
        Command::Train {
            config,
            variant,
            seed,
            out,
        }
        | Command::Run {
            config,
            variant,
            seed,
            out,
        } => {
            let cfg = load_config(&config, variant, seed)?;
            let manifest = run_experiment(&cfg, &out)?;
            println!(
                "run {} variant {} finished in {:.1}s; median reconstruction PSNR {:.3} dB (baseline {:.3} dB)",
                manifest.config_hash,
                manifest.variant,
                manifest.wall_time_s,
                manifest.metrics.recon_psnr_paper.median,
                manifest.metrics.baseline_psnr_paper.median,
            );
            println!(
                "manifest: {}",
                out.join(format!(
                    "run-{}-s{}",
                    &manifest.config_hash[..12],
                    manifest.seed
                ))
                .join("manifest.toml")
                .display()
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            metrics,
            out,
        } => {
            let kinds = MetricKind::parse_list(&metrics)?;
            let report = evaluate_checkpoint(&checkpoint, &dataset, &kinds, &out)?;
            println!(
                "evaluated {} images; median PSNR {:.3} dB, median SSIM {:.4}",
                report.count,
                report.summary.recon_psnr_paper.median,
                report.summary.recon_ssim.median
            );
            Ok(())
        }
        Command::Plot { manifest } => {
            let files = plot_run(&manifest)?;
            for f in &files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
