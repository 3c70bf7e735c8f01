//! End-to-end image coding: block extraction, the compress/decompress paths,
//! and the rate-distortion evaluation losses.
//!
//! Coefficients travel in channel-major raster order (channel, block row,
//! block column); the dither index of a symbol equals its position in that
//! order. All three inference modes share one decode path: the header's
//! generator id selects real or null dither and the header's alpha selects
//! the reconstruction sharpness (alpha 0 is the identity).

use crate::bitstream::{read_bitstream, write_bitstream, BitstreamError, BitstreamHeader};
use crate::channel::{self, ChannelError, DitherStream};
use crate::coder::{CoderError, SymbolCodec};
use crate::model::{CodecMode, LinearModel, BLOCK, BLOCK_DIM};
use crate::softround::{reconstruct, soft_round};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("empty image")]
    EmptyImage,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error("stream needs {got} channels but the model has {model}")]
    ChannelMismatch { got: usize, model: usize },
}

/// RGB image with float samples in `[0, 1]`, row-major `h * w * 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> ImageF {
        assert_eq!(data.len(), width * height * 3);
        ImageF { width, height, data }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> ImageF {
        assert_eq!(bytes.len(), width * height * 3);
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        ImageF { width, height, data }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Mean squared error over all samples (peak 1.0 domain).
pub fn mse(a: &ImageF, b: &ImageF) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let n = a.data.len() as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// `-10 log10(mse)` with unit peak; +inf for a perfect reconstruction.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Symmetric (mirror) extension index: works for any pad length.
fn mirror(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let j = i % period;
    if j < n {
        j
    } else {
        period - 1 - j
    }
}

/// Pads both dimensions up to a multiple of the block size (and at least
/// `min_side`) by symmetric reflection.
pub fn pad_image(img: &ImageF, min_side: usize) -> ImageF {
    let target_w = img.width.max(min_side).div_ceil(BLOCK) * BLOCK;
    let target_h = img.height.max(min_side).div_ceil(BLOCK) * BLOCK;
    if target_w == img.width && target_h == img.height {
        return img.clone();
    }
    let mut data = Vec::with_capacity(target_w * target_h * 3);
    for y in 0..target_h {
        let sy = mirror(y, img.height);
        for x in 0..target_w {
            let sx = mirror(x, img.width);
            let base = (sy * img.width + sx) * 3;
            data.extend_from_slice(&img.data[base..base + 3]);
        }
    }
    ImageF::new(target_w, target_h, data)
}

/// Flattens an already-padded image into `[n_blocks, BLOCK_DIM]`; blocks in
/// raster order, elements in (row, column, channel) order within a block.
pub fn extract_blocks(img: &ImageF) -> Tensor {
    assert!(img.width % BLOCK == 0 && img.height % BLOCK == 0, "image must be padded");
    let (wb, hb) = (img.width / BLOCK, img.height / BLOCK);
    let mut out = Vec::with_capacity(wb * hb * BLOCK_DIM);
    for by in 0..hb {
        for bx in 0..wb {
            for py in 0..BLOCK {
                let y = by * BLOCK + py;
                let base = (y * img.width + bx * BLOCK) * 3;
                out.extend_from_slice(&img.data[base..base + BLOCK * 3]);
            }
        }
    }
    Tensor::new(vec![wb * hb, BLOCK_DIM], out)
}

/// Inverse of [`extract_blocks`], cropping to `width x height`.
pub fn assemble_blocks(blocks: &Tensor, padded_w: usize, width: usize, height: usize) -> ImageF {
    let wb = padded_w / BLOCK;
    let n_blocks = blocks.shape()[0];
    let hb = n_blocks / wb;
    let padded_h = hb * BLOCK;
    let mut data = vec![0.0; padded_w * padded_h * 3];
    let d = blocks.data();
    for b in 0..n_blocks {
        let (by, bx) = (b / wb, b % wb);
        for py in 0..BLOCK {
            let y = by * BLOCK + py;
            let dst = (y * padded_w + bx * BLOCK) * 3;
            let src = b * BLOCK_DIM + py * BLOCK * 3;
            data[dst..dst + BLOCK * 3].copy_from_slice(&d[src..src + BLOCK * 3]);
        }
    }
    let mut cropped = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let base = y * padded_w * 3;
        cropped.extend_from_slice(&data[base..base + width * 3]);
    }
    ImageF::new(width, height, cropped)
}

/// `out[n, m] = sum_k x[n, k] w[m, k]` (same convention as the tape op).
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let (m, k2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(k, k2);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += x.data()[i * k + t] * w.data()[j * k + t];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Analysis coefficients of a padded image: `[n_blocks, C]`.
pub fn analyze(model: &LinearModel, padded: &ImageF) -> Tensor {
    let blocks = extract_blocks(padded);
    matmul_nt(&blocks, &model.analysis)
}

/// Pixel blocks from reconstructed coefficients: `[n_blocks, BLOCK_DIM]`.
pub fn synthesize(model: &LinearModel, coefficients: &Tensor) -> Tensor {
    matmul_nt(coefficients, &model.synthesis)
}

fn effective_alpha(model: &LinearModel, mode: CodecMode, alpha_override: Option<f64>) -> f64 {
    let a = alpha_override.unwrap_or(match mode {
        CodecMode::UnUq => 0.0,
        _ => model.config.alpha_eval,
    });
    // The header stores f32; quantize up front so encoder and decoder
    // evaluate the PMF at the identical sharpness.
    (a as f32) as f64
}

fn dither_for(mode: CodecMode, seed: u64) -> DitherStream {
    match mode {
        CodecMode::UnQ => DitherStream::null(),
        _ => DitherStream::new(seed),
    }
}

/// Block-major `[B, C]` coefficients reordered to channel-major symbols.
fn to_channel_major(y: &Tensor) -> Vec<f64> {
    let (b, c) = (y.shape()[0], y.shape()[1]);
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        for ch in 0..c {
            out[ch * b + i] = y.data()[i * c + ch];
        }
    }
    out
}

pub fn compress(
    img: &ImageF,
    model: &LinearModel,
    mode: CodecMode,
    seed: u64,
) -> Result<Vec<u8>, CodecError> {
    compress_with_alpha(img, model, mode, seed, None)
}

/// Compress with an explicit sharpness (used to probe the hard-quantization
/// limit); `None` takes the mode's default.
pub fn compress_with_alpha(
    img: &ImageF,
    model: &LinearModel,
    mode: CodecMode,
    seed: u64,
    alpha_override: Option<f64>,
) -> Result<Vec<u8>, CodecError> {
    if img.width == 0 || img.height == 0 {
        return Err(CodecError::EmptyImage);
    }
    let alpha = effective_alpha(model, mode, alpha_override);
    let dither = dither_for(mode, seed);
    let padded = pad_image(img, BLOCK);
    let y = analyze(model, &padded);
    let b = y.shape()[0];
    let soft: Vec<f64> = if alpha > 0.0 {
        to_channel_major(&y).iter().map(|&v| soft_round(v, alpha)).collect()
    } else {
        to_channel_major(&y)
    };
    let symbols = channel::universal_quantize(&soft, &dither, 0)?;
    let density = model.density.prepare();
    let codec = SymbolCodec::new(&density, alpha);
    let payload = codec.encode(&symbols, &dither, 0, |j| j / b);
    let header = BitstreamHeader {
        generator: dither.generator(),
        seed: dither.seed(),
        model_hash: model.hash8(),
        alpha: alpha as f32,
        width: img.width as u32,
        height: img.height as u32,
        channels: model.channels() as u16,
    };
    Ok(write_bitstream(&header, &payload))
}

pub fn decompress(bytes: &[u8], model: &LinearModel) -> Result<ImageF, CodecError> {
    let (header, payload) = read_bitstream(bytes)?;
    if header.model_hash != model.hash8() {
        return Err(CodecError::Bitstream(BitstreamError::ModelHashMismatch));
    }
    if header.channels as usize != model.channels() {
        return Err(CodecError::ChannelMismatch {
            got: header.channels as usize,
            model: model.channels(),
        });
    }
    let dither = DitherStream::from_parts(header.generator, header.seed)
        .ok_or(BitstreamError::UnknownGenerator(header.generator))?;
    let alpha = header.alpha as f64;
    let (w, h) = (header.width as usize, header.height as usize);
    let padded_w = w.max(BLOCK).div_ceil(BLOCK) * BLOCK;
    let padded_h = h.max(BLOCK).div_ceil(BLOCK) * BLOCK;
    let b = (padded_w / BLOCK) * (padded_h / BLOCK);
    let c = model.channels();
    let density = model.density.prepare();
    let codec = SymbolCodec::new(&density, alpha);
    let symbols = codec.decode(payload, b * c, &dither, 0, |j| j / b)?;
    let z = channel::channel_reconstruct(&symbols, &dither, 0);
    // Back to block-major with the decoder-side reconstruction applied.
    let mut coef = vec![0.0; b * c];
    for ch in 0..c {
        for i in 0..b {
            coef[i * c + ch] = reconstruct(z[ch * b + i], alpha);
        }
    }
    let pixels = synthesize(model, &Tensor::new(vec![b, c], coef));
    let mut img = assemble_blocks(&pixels, padded_w, w, h);
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Decomposed rate/distortion numbers for one image.
#[derive(Debug, Clone, Copy)]
pub struct RdPoint {
    /// Model cross-entropy of the transmitted values, bits per pixel.
    pub rate_bpp: f64,
    pub mse: f64,
    /// `rate_bpp + lambda * mse`.
    pub loss: f64,
}

fn rd_point_from_values(
    model: &LinearModel,
    img: &ImageF,
    padded: &ImageF,
    z_channel_major: &[f64],
    alpha: f64,
    lambda: f64,
) -> RdPoint {
    let density = model.density.prepare();
    let b = z_channel_major.len() / model.channels();
    let mut bits = 0.0;
    for (j, &z) in z_channel_major.iter().enumerate() {
        bits += -density.log2_prob(j / b, z, alpha);
    }
    let mut coef = vec![0.0; z_channel_major.len()];
    let c = model.channels();
    for ch in 0..c {
        for i in 0..b {
            coef[i * c + ch] = reconstruct(z_channel_major[ch * b + i], alpha);
        }
    }
    let pixels = synthesize(model, &Tensor::new(vec![b, c], coef));
    let mut recon = assemble_blocks(&pixels, padded.width, img.width, img.height);
    for v in recon.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let d = mse(img, &recon);
    let rate_bpp = bits / img.pixels() as f64;
    RdPoint { rate_bpp, mse: d, loss: rate_bpp + lambda * d }
}

/// Inference-side loss: transmit through the chosen channel and measure the
/// model cross-entropy plus distortion of the decoded image.
pub fn eval_channel_loss(
    model: &LinearModel,
    img: &ImageF,
    mode: CodecMode,
    seed: u64,
    lambda: f64,
) -> Result<RdPoint, CodecError> {
    let alpha = effective_alpha(model, mode, None);
    let dither = dither_for(mode, seed);
    let padded = pad_image(img, BLOCK);
    let y = analyze(model, &padded);
    let soft: Vec<f64> = if alpha > 0.0 {
        to_channel_major(&y).iter().map(|&v| soft_round(v, alpha)).collect()
    } else {
        to_channel_major(&y)
    };
    let symbols = channel::universal_quantize(&soft, &dither, 0)?;
    let z = channel::channel_reconstruct(&symbols, &dither, 0);
    Ok(rd_point_from_values(model, img, &padded, &z, alpha, lambda))
}

/// Training-side loss on the same image: add fresh noise instead of running
/// the quantizer. With matching seeds this is the quantity the channel
/// transports exactly in distribution.
pub fn eval_noise_loss(
    model: &LinearModel,
    img: &ImageF,
    seed: u64,
    lambda: f64,
) -> Result<RdPoint, CodecError> {
    let alpha = effective_alpha(model, model.config.mode, None);
    let dither = DitherStream::new(seed);
    let padded = pad_image(img, BLOCK);
    let y = analyze(model, &padded);
    let soft: Vec<f64> = if alpha > 0.0 {
        to_channel_major(&y).iter().map(|&v| soft_round(v, alpha)).collect()
    } else {
        to_channel_major(&y)
    };
    let z = channel::train_channel_sample(&soft, &dither, 0);
    Ok(rd_point_from_values(model, img, &padded, &z, alpha, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DensityConfig;
    use crate::model::RdConfig;

    fn tiny_model(mode: CodecMode, channels: usize, seed: u64) -> LinearModel {
        let mut cfg = RdConfig::new(mode, channels, 0.01, 100, seed);
        cfg.density = DensityConfig { hidden: vec![4, 4], init_scale: 10.0 };
        LinearModel::init(cfg)
    }

    fn gradient_image(w: usize, h: usize) -> ImageF {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w.max(1) as f64;
                let fy = y as f64 / h.max(1) as f64;
                data.extend_from_slice(&[fx, fy, 0.5 * (fx + fy)]);
            }
        }
        ImageF::new(w, h, data)
    }

    #[test]
    fn block_extraction_round_trips() {
        let img = gradient_image(24, 16);
        let blocks = extract_blocks(&img);
        assert_eq!(blocks.shape(), &[6, BLOCK_DIM]);
        let back = assemble_blocks(&blocks, 24, 24, 16);
        assert_eq!(back, img);
    }

    #[test]
    fn shape_contract_two_by_two_blocks() {
        let model = tiny_model(CodecMode::UnUq, 5, 3);
        let img = gradient_image(16, 16);
        let y = analyze(&model, &pad_image(&img, BLOCK));
        assert_eq!(y.shape(), &[4, 5]);
    }

    #[test]
    fn constant_image_gives_identical_block_coefficients() {
        let model = tiny_model(CodecMode::UnUq, 4, 5);
        let img = ImageF::new(32, 16, vec![0.5; 32 * 16 * 3]);
        let y = analyze(&model, &img);
        let c = 4;
        for b in 1..y.shape()[0] {
            for ch in 0..c {
                assert_eq!(y.data()[b * c + ch], y.data()[ch]);
            }
        }
    }

    #[test]
    fn transposed_synthesis_reconstructs_at_full_rank() {
        // With C = BLOCK_DIM and synthesis = analysis^T the transform pair is
        // orthogonal, so g(f(x)) = x without a channel.
        let mut model = tiny_model(CodecMode::UnUq, BLOCK_DIM, 6);
        let a = model.analysis.data().to_vec();
        let mut b = vec![0.0; BLOCK_DIM * BLOCK_DIM];
        for i in 0..BLOCK_DIM {
            for j in 0..BLOCK_DIM {
                b[i * BLOCK_DIM + j] = a[j * BLOCK_DIM + i];
            }
        }
        model.synthesis = Tensor::new(vec![BLOCK_DIM, BLOCK_DIM], b);
        let img = gradient_image(16, 8);
        let y = analyze(&model, &img);
        let pixels = synthesize(&model, &y);
        let back = assemble_blocks(&pixels, 16, 16, 8);
        let err = mse(&img, &back);
        assert!(err < 1e-8, "mse={err}");
    }

    #[test]
    fn padding_crops_back_exactly() {
        let img = gradient_image(13, 9);
        let padded = pad_image(&img, BLOCK);
        assert_eq!(padded.width, 16);
        assert_eq!(padded.height, 16);
        let blocks = extract_blocks(&padded);
        let back = assemble_blocks(&blocks, 16, 13, 9);
        assert_eq!(back, img);
    }

    #[test]
    fn compress_decompress_round_trip_is_deterministic() {
        for mode in [CodecMode::UnQ, CodecMode::UnUq, CodecMode::UnUqSr] {
            let model = tiny_model(mode, 6, 11);
            let img = gradient_image(24, 24);
            let s1 = compress(&img, &model, mode, 42).unwrap();
            let s2 = compress(&img, &model, mode, 42).unwrap();
            assert_eq!(s1, s2, "mode {mode:?}");
            let d1 = decompress(&s1, &model).unwrap();
            let d2 = decompress(&s2, &model).unwrap();
            assert_eq!(d1, d2);
            assert_eq!(d1.width, 24);
            assert_eq!(d1.height, 24);
        }
    }

    #[test]
    fn wrong_model_is_rejected_by_hash() {
        let model = tiny_model(CodecMode::UnUq, 6, 11);
        let other = tiny_model(CodecMode::UnUq, 6, 12);
        let img = gradient_image(16, 16);
        let bytes = compress(&img, &model, CodecMode::UnUq, 1).unwrap();
        let err = decompress(&bytes, &other).unwrap_err();
        assert!(matches!(
            err,
            CodecError::Bitstream(BitstreamError::ModelHashMismatch)
        ));
    }

    #[test]
    fn empty_image_is_rejected() {
        let model = tiny_model(CodecMode::UnUq, 4, 2);
        let img = ImageF::new(0, 0, vec![]);
        assert!(matches!(
            compress(&img, &model, CodecMode::UnUq, 0),
            Err(CodecError::EmptyImage)
        ));
    }

    #[test]
    fn un_q_stream_has_null_generator_and_un_uq_zero_alpha() {
        let model = tiny_model(CodecMode::UnUqSr, 4, 9);
        let img = gradient_image(16, 16);
        let q = compress(&img, &model, CodecMode::UnQ, 7).unwrap();
        let (h, _) = read_bitstream(&q).unwrap();
        assert_eq!(h.generator, crate::channel::generator_id::NULL);
        assert!(h.alpha > 0.0); // soft-round model keeps its sharpness
        let uq = compress(&img, &model, CodecMode::UnUq, 7).unwrap();
        let (h, _) = read_bitstream(&uq).unwrap();
        assert_eq!(h.generator, crate::channel::generator_id::SPLITMIX64);
        assert_eq!(h.alpha, 0.0);
    }

    #[test]
    fn psnr_matches_mse_relation() {
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(0.0), f64::INFINITY);
    }

    #[test]
    fn blockwise_locality() {
        // Changing one 8x8 input block changes only that block's
        // coefficients.
        let model = tiny_model(CodecMode::UnUq, 6, 21);
        let img = gradient_image(32, 24);
        let mut bumped = img.clone();
        // Block (by=1, bx=2): pixels y in 8..16, x in 16..24.
        for y in 8..16 {
            for x in 16..24 {
                bumped.data[(y * 32 + x) * 3] += 0.25;
            }
        }
        let y0 = analyze(&model, &img);
        let y1 = analyze(&model, &bumped);
        let wb = 4;
        let changed_block = wb + 2;
        for b in 0..y0.shape()[0] {
            let same = y0.data()[b * 6..(b + 1) * 6] == y1.data()[b * 6..(b + 1) * 6];
            assert_eq!(same, b != changed_block, "block {b}");
        }
    }
}
