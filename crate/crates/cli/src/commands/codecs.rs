//! `uqc compress` / `uqc decompress`.

use crate::util::{fmt_f64, load_image, resolve_seed, save_png};
use crate::{existing, usage, CliResult};
use clap::Args;
use std::path::PathBuf;
use uqc_core::bitstream::read_bitstream;
use uqc_core::codec::{compress as compress_image, decompress as decompress_image, mse, psnr};
use uqc_core::{CodecMode, LinearModel};

#[derive(Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input PNG or JPEG.
    #[arg(long)]
    pub input: PathBuf,
    /// Output bitstream (.uqc).
    #[arg(long)]
    pub output: PathBuf,
    /// Coding mode: un-q, un-uq, un-uq-sr (defaults to the model's mode).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input bitstream (.uqc).
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn compress(args: CompressArgs) -> CliResult {
    existing(&args.model, "model file")?;
    existing(&args.input, "input image")?;
    let model = LinearModel::load(&args.model)?;
    let mode = match &args.mode {
        Some(s) => CodecMode::parse(s).ok_or_else(|| usage(format!("unknown mode {s:?}")))?,
        None => model.config.mode,
    };
    let seed = resolve_seed(args.seed);
    let img = load_image(&args.input)?;
    let bytes = compress_image(&img, &model, mode, seed)?;
    std::fs::write(&args.output, &bytes)?;

    // Report the operating point as one CSV line on stdout.
    let (_, payload) = read_bitstream(&bytes).map_err(anyhow::Error::from)?;
    let bpp = (payload.len() as f64 * 8.0) / img.pixels() as f64;
    let recon = decompress_image(&bytes, &model)?;
    let d = mse(&img, &recon);
    println!("image,mode,lambda,alpha,bpp,psnr,mse");
    println!(
        "{},{},{},{},{},{},{}",
        args.input.file_name().unwrap_or_default().to_string_lossy(),
        mode.name(),
        fmt_f64(model.config.lambda),
        fmt_f64(model.config.alpha_eval),
        fmt_f64(bpp),
        fmt_f64(psnr(d)),
        fmt_f64(d),
    );
    Ok(())
}

pub fn decompress(args: DecompressArgs) -> CliResult {
    existing(&args.model, "model file")?;
    existing(&args.input, "input bitstream")?;
    let model = LinearModel::load(&args.model)?;
    let bytes = std::fs::read(&args.input)?;
    let img = decompress_image(&bytes, &model)?;
    save_png(&args.output, &img)?;
    Ok(())
}
