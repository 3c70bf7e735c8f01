//! `uqc train`: fit a linear model on a folder of images.

use crate::util::{fmt_f64, load_dataset, resolve_seed, write_csv};
use crate::{existing, usage, CliError, CliResult};
use clap::Args;
use std::path::PathBuf;
use uqc_core::softround::AlphaSchedule;
use uqc_core::train::{train, TrainError};
use uqc_core::{CodecMode, LinearModel, RdConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of training images (PNG; JPEG read-only).
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Coding mode: un-q, un-uq or un-uq-sr.
    #[arg(long, default_value = "un-uq-sr")]
    pub mode: String,
    /// Soft-round annealing as start:end (ignored for UN modes).
    #[arg(long, default_value = "1:16")]
    pub alpha: String,
    #[arg(long, default_value_t = 20_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Density-only steps before the transforms unfreeze.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Disable expected gradients (pathwise backward everywhere).
    #[arg(long, default_value_t = false)]
    pub pathwise: bool,
    /// Continue training from a checkpointed model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training log CSV (defaults to <out>.train_log.csv).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

fn parse_alpha(s: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("bad --alpha {s:?}, expected start:end"));
    match parts.as_slice() {
        [a, b] => {
            let start: f64 = a.parse().map_err(|_| bad())?;
            let end: f64 = b.parse().map_err(|_| bad())?;
            if start < 0.0 || end < 0.0 {
                return Err(bad());
            }
            Ok((start, end))
        }
        [a] => {
            let v: f64 = a.parse().map_err(|_| bad())?;
            Ok((v, v))
        }
        _ => Err(bad()),
    }
}

pub fn run(args: TrainArgs) -> CliResult {
    existing(&args.data, "data directory")?;
    let mode = CodecMode::parse(&args.mode)
        .ok_or_else(|| usage(format!("unknown mode {:?}", args.mode)))?;
    let (alpha_start, alpha_end) = parse_alpha(&args.alpha)?;
    let seed = resolve_seed(args.seed);

    let dataset = load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(usage(format!("no images found in {}", args.data.display())));
    }
    let images: Vec<_> = dataset.into_iter().map(|(_, im)| im).collect();

    let mut model = if let Some(ckpt) = &args.resume {
        existing(ckpt, "checkpoint")?;
        let mut m = LinearModel::load(ckpt)?;
        // The schedules come from the checkpoint metadata; only the total
        // budget may grow.
        m.config.steps = m.config.steps.max(args.steps);
        m
    } else {
        let mut cfg = RdConfig::new(mode, args.channels, args.lambda, args.steps, seed);
        cfg.batch_size = args.batch;
        cfg.crop = args.crop;
        cfg.learning_rate = args.lr;
        cfg.expected_grads = !args.pathwise;
        if mode == CodecMode::UnUqSr {
            cfg.alpha =
                AlphaSchedule { start: alpha_start, end: alpha_end, total_steps: args.steps };
            cfg.alpha_eval = alpha_end;
        }
        if let Some(w) = args.warmup {
            cfg.warmup_steps = w;
        }
        LinearModel::init(cfg)
    };

    let log = match train(&mut model, &images, args.log_every) {
        Ok(log) => log,
        Err(TrainError::Diverged { step, term, last_good }) => {
            let rescue = args.out.with_extension("lastgood.uqcm");
            last_good.save(&rescue)?;
            return Err(CliError::Runtime(anyhow::anyhow!(
                "training diverged at step {step} ({term} term); last good checkpoint at {}",
                rescue.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    model.save(&args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("train_log.csv"));
    let cfg_json = serde_json::to_string(&model.config).expect("config serializes");
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.rate_bpp),
                fmt_f64(r.mse),
                fmt_f64(r.loss),
                fmt_f64(r.alpha),
                fmt_f64(r.lambda),
            ]
        })
        .collect();
    write_csv(
        &log_path,
        &cfg_json,
        &["step", "rate_bpp", "mse", "loss", "alpha", "lambda"],
        &rows,
    )?;
    println!("model: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}
