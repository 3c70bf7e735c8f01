//! Training: the tape-assembled rate-distortion objective, Adam, and the
//! step loop with schedule handling and checkpointing.

use crate::autodiff::{AutodiffError, DensityLeaves, NodeId, Tape};
use crate::channel::DitherStream;
use crate::codec::{extract_blocks, pad_image, ImageF};
use crate::model::LinearModel;
use crate::tensor::Tensor;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no usable images in the dataset")]
    EmptyDataset,
    #[error("loss became non-finite at step {step} ({term} term); last good checkpoint attached")]
    Diverged { step: u64, term: &'static str, last_good: Box<LinearModel> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One tape-built objective: `loss = rate_bpp + lambda * mse`.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub rate_bpp: NodeId,
    pub mse: NodeId,
    pub analysis: NodeId,
    pub synthesis: NodeId,
    pub density_leaves: DensityLeaves,
}

/// Assembles the objective for one batch of flattened blocks.
///
/// `noise` is block-major (`blocks[i]`'s channel c offset is at `i*C + c`),
/// matching the coefficient tensor layout. `pixels` normalizes the rate to
/// bits per pixel.
pub fn build_rd_loss(
    model: &LinearModel,
    blocks: &Tensor,
    noise: Arc<Vec<f64>>,
    alpha: f64,
    lambda: f64,
    pixels: usize,
    expected_grads: bool,
) -> LossGraph {
    let mut tape = Tape::new();
    let x = tape.leaf(blocks.clone());
    let analysis = tape.param(model.analysis.clone());
    let synthesis = tape.param(model.synthesis.clone());

    let mut weight = Vec::new();
    let mut bias = Vec::new();
    let mut gate = Vec::new();
    for t in &model.density.weight_raw {
        weight.push(tape.param(t.clone()));
    }
    for t in &model.density.bias {
        bias.push(tape.param(t.clone()));
    }
    for t in &model.density.gate_raw {
        gate.push(tape.param(t.clone()));
    }
    let density_leaves = DensityLeaves {
        source: Arc::new(model.density.clone()),
        weight,
        bias,
        gate,
    };
    let eval = Arc::new(model.density.prepare());

    let w = tape.linear(x, analysis);
    let y = if alpha > 0.0 { tape.soft_round(w, alpha, expected_grads) } else { w };
    let bits = tape.rate_bits(
        y,
        noise.clone(),
        eval,
        alpha,
        expected_grads,
        Some(density_leaves.clone()),
    );
    let bits_total = tape.sum(bits);
    let rate_bpp = tape.scale(bits_total, 1.0 / pixels as f64);
    let z = tape.noisy_reconstruct(y, noise, alpha, expected_grads);
    let xh = tape.linear(z, synthesis);
    let mse = tape.mse(xh, blocks);
    let weighted = tape.scale(mse, lambda);
    let loss = tape.add(rate_bpp, weighted);
    LossGraph { tape, loss, rate_bpp, mse, analysis, synthesis, density_leaves }
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; `lrs[i]` is the learning rate for parameter group `i`
    /// (zero freezes the group while its moments still accumulate).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = lrs[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                if lr != 0.0 {
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub loss: f64,
    pub alpha: f64,
    pub lambda: f64,
}

fn substream(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic crop sampler over the dataset.
struct CropSampler<'a> {
    images: &'a [ImageF],
    crop: usize,
    stream: DitherStream,
    draw: u64,
}

impl<'a> CropSampler<'a> {
    fn next_crop(&mut self) -> Tensor {
        let pick = self.stream.uniform01(7, self.draw);
        self.draw += 1;
        let img = &self.images[(pick * self.images.len() as f64) as usize % self.images.len()];
        let max_x = img.width - self.crop;
        let max_y = img.height - self.crop;
        let ox = (self.stream.uniform01(7, self.draw) * (max_x + 1) as f64) as usize % (max_x + 1);
        self.draw += 1;
        let oy = (self.stream.uniform01(7, self.draw) * (max_y + 1) as f64) as usize % (max_y + 1);
        self.draw += 1;
        let mut data = Vec::with_capacity(self.crop * self.crop * 3);
        for y in 0..self.crop {
            let base = ((oy + y) * img.width + ox) * 3;
            data.extend_from_slice(&img.data[base..base + self.crop * 3]);
        }
        extract_blocks(&ImageF::new(self.crop, self.crop, data))
    }
}

/// Trains `model` in place from `config.trained_steps` up to `config.steps`.
/// Returns the log rows (one per `log_every` steps plus the final step).
pub fn train(
    model: &mut LinearModel,
    dataset: &[ImageF],
    log_every: u64,
) -> Result<Vec<TrainLogRow>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = model.config.clone();
    // Reflect-pad every image up to at least one crop.
    let prepared: Vec<ImageF> = dataset.iter().map(|im| pad_image(im, cfg.crop)).collect();
    let mut sampler = CropSampler {
        images: &prepared,
        crop: cfg.crop,
        stream: DitherStream::new(substream(cfg.seed, 0xDA7A)),
        draw: cfg.trained_steps.wrapping_mul(3 * (cfg.batch_size as u64 + 1)),
    };

    let param_sizes: Vec<usize> = {
        let mut s = vec![model.analysis.len(), model.synthesis.len()];
        for (_, _, t) in model.density.param_tensors() {
            s.push(t.len());
        }
        s
    };
    let mut adam = Adam::new(&param_sizes);
    let mut log = Vec::new();
    let mut last_good = model.clone();
    let blocks_per_crop = (cfg.crop / crate::model::BLOCK).pow(2);
    let pixels_per_batch = cfg.batch_size * cfg.crop * cfg.crop;

    let start = cfg.trained_steps;
    for step in start..cfg.steps {
        let alpha = cfg.alpha_at(step);
        let lambda = cfg.lambda_at(step);
        let lr = if step < cfg.warmup_steps { 0.0 } else { cfg.lr_at(step) };
        let lr_density = cfg.lr_at(step);

        // Batch assembly.
        let mut batch = Vec::with_capacity(cfg.batch_size * blocks_per_crop * crate::model::BLOCK_DIM);
        for _ in 0..cfg.batch_size {
            batch.extend_from_slice(sampler.next_crop().data());
        }
        let blocks = Tensor::new(
            vec![cfg.batch_size * blocks_per_crop, crate::model::BLOCK_DIM],
            batch,
        );

        // Fresh per-step channel noise.
        let noise_stream = DitherStream::new(substream(cfg.seed, 0xC0DE ^ step));
        let n_coeff = blocks.shape()[0] * cfg.channels;
        let noise = Arc::new(noise_stream.offsets(0, n_coeff));

        let mut graph = build_rd_loss(
            model,
            &blocks,
            noise,
            alpha,
            lambda,
            pixels_per_batch,
            cfg.expected_grads,
        );
        let rate = graph.tape.value(graph.rate_bpp).item();
        let distortion = graph.tape.value(graph.mse).item();
        if !rate.is_finite() || !distortion.is_finite() {
            let term = if rate.is_finite() { "distortion" } else { "rate" };
            return Err(TrainError::Diverged { step, term, last_good: Box::new(last_good) });
        }
        graph.tape.backward(graph.loss)?;

        let mut grads = vec![
            graph.tape.grad_tensor(graph.analysis),
            graph.tape.grad_tensor(graph.synthesis),
        ];
        let leaf_ids: Vec<NodeId> = graph
            .density_leaves
            .weight
            .iter()
            .chain(graph.density_leaves.bias.iter())
            .chain(graph.density_leaves.gate.iter())
            .copied()
            .collect();
        for id in &leaf_ids {
            grads.push(graph.tape.grad_tensor(*id));
        }

        let loss_val = graph.tape.value(graph.loss).item();
        if step % log_every == 0 || step + 1 == cfg.steps {
            log.push(TrainLogRow { step, rate_bpp: rate, mse: distortion, loss: loss_val, alpha, lambda });
            last_good = model.clone();
            last_good.config.trained_steps = step;
        }

        let mut lrs = vec![lr, lr];
        lrs.extend(std::iter::repeat(lr_density).take(leaf_ids.len()));
        {
            let mut params: Vec<&mut Tensor> = Vec::new();
            params.push(&mut model.analysis);
            params.push(&mut model.synthesis);
            for t in model.density.param_tensors_mut() {
                params.push(t);
            }
            adam.step(&mut params, &grads, &lrs);
        }
        model.config.trained_steps = step + 1;
    }
    Ok(log)
}
