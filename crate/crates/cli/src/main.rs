use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pennet_core::checkpoint::{load_checkpoint, model_id};
use pennet_core::data::{self, DatasetManifest, MaskSpec, Split};
use pennet_core::inpaint::inpaint_encoded;
use pennet_core::metrics::evaluate;
use pennet_core::train::{self, SmokeConfig, TrainConfig, TrainState};
use pennet_service::{AppState, CHECKPOINT_ENV};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

/// Frame in which square mask sizes are given.
const MASK_FRAME: usize = 256;

#[derive(Parser)]
#[command(name = "pennet", version, about = "Image inpainting with a pyramid-context encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Center,
    Random,
    Irregular,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test split and write a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mask: MaskArg,
        /// Square hole side in a 256×256 frame.
        #[arg(long, value_parser = ["32", "64", "128"], default_value = "128")]
        size: String,
        /// Mask file or directory for `--mask irregular`.
        #[arg(long)]
        mask_source: Option<PathBuf>,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inpaint one image. Uses a running service when `--server` is given.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "PENNET_SERVER")]
        server: Option<String>,
    },
    /// Overfit the mini model on a fixed synthetic set.
    Smoke {
        #[arg(long, default_value = "smoke-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve `POST /inpaint` and `GET /healthz`.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            config,
            checkpoint,
            mask,
            size,
            mask_source,
            out,
        } => cmd_eval(&config, &checkpoint, mask, size.parse()?, mask_source, out.as_deref()),
        Command::Infer {
            image,
            mask,
            checkpoint,
            out,
            server,
        } => cmd_infer(&image, &mask, checkpoint.as_deref(), &out, server.as_deref()),
        Command::Smoke {
            out,
            steps,
            images,
            batch_size,
            resolution,
            seed,
        } => cmd_smoke(&out, steps, images, batch_size, resolution, seed),
        Command::Serve {
            host,
            port,
            checkpoint,
        } => cmd_serve(&host, port, checkpoint),
    }
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let manifest_path = cfg.manifest.clone().context("config has no `manifest`")?;
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("train-out"));
    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("manifest {}", manifest_path.display()))?;
    let paths: Vec<PathBuf> = manifest.split(Split::Train).into_iter().map(|e| e.path.clone()).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let samples = data::load_images(&paths, cfg.model.resolution, workers);
    info!(images = samples.len(), skipped = paths.len() - samples.len(), "training set loaded");
    let mut state = TrainState::new(cfg)?;
    let last = train::train(&mut state, samples, &out_dir, |log| println!("{log}"))?;
    println!("checkpoint {}", last.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    mask: MaskArg,
    size: usize,
    mask_source: Option<PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = TrainConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let state = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let manifest_path = cfg.manifest.clone().context("config has no `manifest`")?;
    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("manifest {}", manifest_path.display()))?;
    let spec = match mask {
        MaskArg::Center => MaskSpec::center(size),
        MaskArg::Random => MaskSpec::random(size),
        MaskArg::Irregular => MaskSpec::irregular(mask_source.context("`--mask irregular` needs `--mask-source`")?),
    };
    let res = state.config.model.resolution;
    let paths: Vec<PathBuf> = manifest.split(Split::Test).into_iter().map(|e| e.path.clone()).collect();
    let samples = data::load_images(&paths, res, std::thread::available_parallelism().map_or(1, |n| n.get()));
    if samples.is_empty() {
        bail!("no readable test images in {}", manifest_path.display());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks = samples
        .iter()
        .map(|_| spec.generate(MASK_FRAME, &mut rng).map(|m| m.resize_nearest(res, res)))
        .collect::<pennet_core::Result<Vec<_>>>()?;
    let report = evaluate(&state.generator, &samples, &masks, &spec, &model_id(&state), None)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            std::fs::write(p, json)?;
            println!(
                "mean_l1={:.4} mean_ms_ssim={:.4} images={} report={}",
                report.mean_l1,
                report.mean_ms_ssim,
                report.records.len(),
                p.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_infer(image: &Path, mask: &Path, checkpoint: Option<&Path>, out: &Path, server: Option<&str>) -> Result<()> {
    let image_bytes = std::fs::read(image).with_context(|| format!("image {}", image.display()))?;
    let mask_bytes = std::fs::read(mask).with_context(|| format!("mask {}", mask.display()))?;
    let png = match server {
        Some(url) => {
            let client = pennet_client::Client::new(url)?;
            let done = client.inpaint(&image_bytes, &mask_bytes, None)?;
            info!(latency_ms = done.response.latency_ms, model_id = %done.response.model_id, "inpainted remotely");
            done.png
        }
        None => {
            let path = checkpoint.with_context(|| format!("no checkpoint: pass --checkpoint or set {CHECKPOINT_ENV}"))?;
            let state = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
            inpaint_encoded(&state.generator, &image_bytes, &mask_bytes)?
        }
    };
    std::fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_smoke(
    out: &Path,
    steps: u64,
    images: usize,
    batch_size: Option<usize>,
    resolution: usize,
    seed: u64,
) -> Result<()> {
    let mut cfg = SmokeConfig {
        steps,
        images,
        ..SmokeConfig::default()
    };
    cfg.train.seed = seed;
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    if resolution != cfg.train.model.resolution {
        cfg.train.model.resolution = resolution;
        cfg.train.mask = MaskSpec::center(resolution / 2);
    }
    let (report, _) = train::overfit_smoke(&cfg, Some(out), |log| println!("{log}"))?;
    println!(
        "initial_masked_mae={:.6} final_masked_mae={:.6} ratio={:.4} wall_secs={:.1} passed={}",
        report.initial_masked_mae,
        report.final_masked_mae,
        report.ratio,
        report.wall_secs,
        report.passed()
    );
    Ok(())
}

fn cmd_serve(host: &str, port: u16, checkpoint: Option<PathBuf>) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        if checkpoint.is_none() {
            tracing::warn!("no checkpoint given; /healthz stays 503");
        }
        pennet_service::serve(listener, AppState::new(), checkpoint, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
