//! `uqc eval` and `uqc sweep`: rate-distortion measurement over datasets.

use crate::util::{fmt_f64, load_dataset, resolve_seed, substream, write_csv};
use crate::{existing, usage, CliError, CliResult};
use clap::Args;
use rayon::prelude::*;
use std::path::PathBuf;
use uqc_core::bitstream::read_bitstream;
use uqc_core::codec::{compress, decompress, mse, psnr, ImageF};
use uqc_core::{CodecMode, LinearModel};

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated modes to evaluate.
    #[arg(long, default_value = "un-q,un-uq,un-uq-sr")]
    pub modes: String,
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-image evaluation (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Trained model files, one per lambda.
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Optional lambda filter; every value must match a model.
    #[arg(long)]
    pub lambdas: Option<String>,
    #[arg(long, default_value = "un-q,un-uq,un-uq-sr")]
    pub modes: String,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

pub struct EvalRecord {
    pub image: String,
    pub mode: CodecMode,
    pub lambda: f64,
    pub alpha: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub mse: f64,
}

impl EvalRecord {
    fn row(&self) -> Vec<String> {
        vec![
            self.image.clone(),
            self.mode.name().to_string(),
            fmt_f64(self.lambda),
            fmt_f64(self.alpha),
            fmt_f64(self.bpp),
            fmt_f64(self.psnr),
            fmt_f64(self.mse),
        ]
    }
}

pub const EVAL_HEADER: [&str; 7] = ["image", "mode", "lambda", "alpha", "bpp", "psnr", "mse"];

fn parse_modes(s: &str) -> Result<Vec<CodecMode>, CliError> {
    s.split(',')
        .map(|m| CodecMode::parse(m.trim()).ok_or_else(|| usage(format!("unknown mode {m:?}"))))
        .collect()
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    let threads = if jobs == 0 { 0 } else { jobs };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

/// Evaluates every (image, mode) pair; output order is input order
/// regardless of worker scheduling.
pub fn eval_dataset(
    model: &LinearModel,
    images: &[(String, ImageF)],
    modes: &[CodecMode],
    seed: u64,
    jobs: usize,
) -> Result<Vec<EvalRecord>, CliError> {
    let tasks: Vec<(usize, &(String, ImageF), CodecMode)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| modes.iter().map(move |&m| (i, im, m)))
        .collect();
    let records: Result<Vec<EvalRecord>, String> = pool(jobs).install(|| {
        tasks
            .par_iter()
            .map(|&(idx, (name, img), mode)| {
                let s = substream(seed, idx as u64);
                let bytes = compress(img, model, mode, s).map_err(|e| e.to_string())?;
                let (_, payload) = read_bitstream(&bytes).map_err(|e| e.to_string())?;
                let payload_bits = payload.len() as f64 * 8.0;
                let recon = decompress(&bytes, model).map_err(|e| e.to_string())?;
                let d = mse(img, &recon);
                Ok(EvalRecord {
                    image: name.clone(),
                    mode,
                    lambda: model.config.lambda,
                    alpha: match mode {
                        CodecMode::UnUq => 0.0,
                        _ => model.config.alpha_eval,
                    },
                    bpp: payload_bits / img.pixels() as f64,
                    psnr: psnr(d),
                    mse: d,
                })
            })
            .collect()
    });
    records.map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))
}

/// Per-mode mean rows appended after the per-image rows.
fn summary_rows(records: &[EvalRecord], modes: &[CodecMode]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for &mode in modes {
        let subset: Vec<&EvalRecord> = records.iter().filter(|r| r.mode == mode).collect();
        if subset.is_empty() {
            continue;
        }
        let n = subset.len() as f64;
        let bpp = subset.iter().map(|r| r.bpp).sum::<f64>() / n;
        let m = subset.iter().map(|r| r.mse).sum::<f64>() / n;
        rows.push(vec![
            "mean".to_string(),
            mode.name().to_string(),
            fmt_f64(subset[0].lambda),
            fmt_f64(subset[0].alpha),
            fmt_f64(bpp),
            fmt_f64(psnr(m)),
            fmt_f64(m),
        ]);
    }
    rows
}

pub fn eval(args: EvalArgs) -> CliResult {
    existing(&args.model, "model file")?;
    existing(&args.data, "data directory")?;
    let modes = parse_modes(&args.modes)?;
    let model = LinearModel::load(&args.model)?;
    let images = load_dataset(&args.data)?;
    if images.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "no images found in {}",
            args.data.display()
        )));
    }
    let seed = resolve_seed(args.seed);
    let records = eval_dataset(&model, &images, &modes, seed, args.jobs)?;
    let mut rows: Vec<Vec<String>> = records.iter().map(|r| r.row()).collect();
    rows.extend(summary_rows(&records, &modes));
    let cfg = serde_json::to_string(&model.config).expect("config serializes");
    write_csv(&args.out, &cfg, &EVAL_HEADER, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CliResult {
    existing(&args.data, "data directory")?;
    let modes = parse_modes(&args.modes)?;
    let lambda_filter: Option<Vec<f64>> = match &args.lambdas {
        Some(s) => Some(
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("malformed lambda {x:?} in --lambdas")))
                })
                .collect::<Result<Vec<f64>, CliError>>()?,
        ),
        None => None,
    };
    let mut models = Vec::new();
    for path in &args.models {
        existing(path, "model file")?;
        models.push((path.clone(), LinearModel::load(path)?));
    }
    if let Some(filter) = &lambda_filter {
        for &l in filter {
            if !models.iter().any(|(_, m)| (m.config.lambda - l).abs() < 1e-12) {
                return Err(CliError::Runtime(anyhow::anyhow!(
                    "--lambdas value {l} matches none of the given models"
                )));
            }
        }
        models.retain(|(_, m)| filter.iter().any(|&l| (m.config.lambda - l).abs() < 1e-12));
    }
    models.sort_by(|a, b| a.1.config.lambda.partial_cmp(&b.1.config.lambda).unwrap());

    let images = load_dataset(&args.data)?;
    if images.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "no images found in {}",
            args.data.display()
        )));
    }
    let seed = resolve_seed(args.seed);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut config_echo = Vec::new();
    for (path, model) in &models {
        let records = eval_dataset(model, &images, &modes, seed, args.jobs)?;
        rows.extend(records.iter().map(|r| r.row()));
        rows.extend(summary_rows(&records, &modes));
        config_echo.push(serde_json::json!({
            "model": path.display().to_string(),
            "lambda": model.config.lambda,
        }));
    }
    let cfg = serde_json::to_string(&config_echo).expect("config serializes");
    write_csv(&args.out, &cfg, &EVAL_HEADER, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
