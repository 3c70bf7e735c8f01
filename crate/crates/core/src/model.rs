//! The linear 8x8 block-transform codec model: analysis/synthesis matrices,
//! the per-channel density, run configuration, and the serialized model file.

use crate::channel::DitherStream;
use crate::density::{DensityConfig, FactorizedDensity};
use crate::softround::AlphaSchedule;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const BLOCK: usize = 8;
/// Flattened size of one 8x8 RGB block.
pub const BLOCK_DIM: usize = BLOCK * BLOCK * 3;

pub const MODEL_MAGIC: [u8; 4] = *b"UQCM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    BadVersion(u8),
    #[error("model file hash mismatch (corrupt or edited)")]
    HashMismatch,
    #[error("model file truncated")]
    Truncated,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("config: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("unsupported tensor dtype {0}")]
    BadDtype(u8),
}

/// Inference-time coding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodecMode {
    /// Train with noise, round at test time (no dither in the stream).
    #[serde(rename = "un-q")]
    UnQ,
    /// Universal quantization at test time; matches the training channel.
    #[serde(rename = "un-uq")]
    UnUq,
    /// Universal quantization around the soft-rounded transform.
    #[serde(rename = "un-uq-sr")]
    UnUqSr,
}

impl CodecMode {
    pub fn parse(s: &str) -> Option<CodecMode> {
        match s {
            "un-q" => Some(CodecMode::UnQ),
            "un-uq" => Some(CodecMode::UnUq),
            "un-uq-sr" => Some(CodecMode::UnUqSr),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CodecMode::UnQ => "un-q",
            CodecMode::UnUq => "un-uq",
            CodecMode::UnUqSr => "un-uq-sr",
        }
    }
}

fn default_batch() -> usize {
    8
}
fn default_crop() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}
fn default_lr_drop() -> f64 {
    0.8
}
fn default_lambda_halve() -> Vec<f64> {
    vec![0.05, 0.10]
}

/// Full run configuration; serialized into the model file so schedules can be
/// reproduced on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdConfig {
    pub mode: CodecMode,
    pub channels: usize,
    pub lambda: f64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub seed: u64,
    /// Sharpness annealing for the soft-round modes; ignored for UN modes.
    pub alpha: AlphaSchedule,
    /// Sharpness used by the soft-round reconstruction at inference.
    pub alpha_eval: f64,
    #[serde(default = "default_true")]
    pub expected_grads: bool,
    /// Steps during which only the density trains.
    pub warmup_steps: u64,
    /// Fraction of the budget after which the learning rate drops tenfold.
    #[serde(default = "default_lr_drop")]
    pub lr_drop_frac: f64,
    /// Fractions of the budget at which lambda halves.
    #[serde(default = "default_lambda_halve")]
    pub lambda_halve_fracs: Vec<f64>,
    #[serde(default)]
    pub density: DensityConfig,
    /// Steps already taken (checkpoint metadata; drives resumed schedules).
    #[serde(default)]
    pub trained_steps: u64,
}

impl RdConfig {
    pub fn new(mode: CodecMode, channels: usize, lambda: f64, steps: u64, seed: u64) -> RdConfig {
        assert!(lambda >= 0.0, "lambda must be nonnegative");
        let alpha = match mode {
            CodecMode::UnUqSr => AlphaSchedule { start: 1.0, end: 16.0, total_steps: steps },
            _ => AlphaSchedule::constant(0.0),
        };
        RdConfig {
            mode,
            channels,
            lambda,
            steps,
            batch_size: default_batch(),
            crop: default_crop(),
            learning_rate: default_lr(),
            seed,
            alpha,
            alpha_eval: alpha.end,
            expected_grads: true,
            // Density-only phase, rescaled from the reference protocol
            // (5k of 2M steps).
            warmup_steps: (steps / 400).max(50),
            lr_drop_frac: default_lr_drop(),
            lambda_halve_fracs: default_lambda_halve(),
            density: DensityConfig::default(),
            trained_steps: 0,
        }
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        match self.mode {
            CodecMode::UnUqSr => self.alpha.at(step),
            _ => 0.0,
        }
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        let mut l = self.lambda;
        for &frac in &self.lambda_halve_fracs {
            if (step as f64) >= frac * self.steps as f64 {
                l *= 0.5;
            }
        }
        l
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if (step as f64) >= self.lr_drop_frac * self.steps as f64 {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

/// Linear block-transform model: `analysis` maps a flattened block to C
/// coefficients, `synthesis` maps reconstructed coefficients back.
#[derive(Debug, Clone)]
pub struct LinearModel {
    /// `[C, BLOCK_DIM]`, orthonormal rows at init.
    pub analysis: Tensor,
    /// `[BLOCK_DIM, C]`, orthonormal columns at init (independent of analysis).
    pub synthesis: Tensor,
    pub density: FactorizedDensity,
    pub config: RdConfig,
}

/// Gram-Schmidt with one re-orthogonalization pass; returns `[rows, cols]`
/// row-major with orthonormal columns. Deterministic for a given stream.
fn orthonormal_columns(rows: usize, cols: usize, dither: &DitherStream, lane: u64) -> Vec<f64> {
    assert!(cols <= rows);
    let mut m = vec![0.0f64; rows * cols];
    for (i, v) in m.iter_mut().enumerate() {
        *v = dither.standard_normal(lane, i as u64);
    }
    let col = |m: &Vec<f64>, j: usize| -> Vec<f64> { (0..rows).map(|r| m[r * cols + j]).collect() };
    for j in 0..cols {
        let mut v = col(&m, j);
        for _pass in 0..2 {
            for i in 0..j {
                let q = col(&m, i);
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for r in 0..rows {
                    v[r] -= dot * q[r];
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "degenerate column during orthogonal init");
        for r in 0..rows {
            m[r * cols + j] = v[r] / norm;
        }
    }
    m
}

impl LinearModel {
    /// Fresh model with independently drawn random orthogonal transforms.
    pub fn init(config: RdConfig) -> LinearModel {
        let c = config.channels;
        assert!(c >= 1 && c <= BLOCK_DIM, "channels must be in 1..={BLOCK_DIM}");
        let stream = DitherStream::new(config.seed);
        // Analysis: transpose of an orthonormal-column matrix, so rows are
        // orthonormal. Synthesis drawn independently (different lane).
        let q = orthonormal_columns(BLOCK_DIM, c, &stream, 11);
        let mut analysis = vec![0.0; c * BLOCK_DIM];
        for r in 0..BLOCK_DIM {
            for j in 0..c {
                analysis[j * BLOCK_DIM + r] = q[r * c + j];
            }
        }
        let synthesis = orthonormal_columns(BLOCK_DIM, c, &stream, 12);
        let density = FactorizedDensity::new(c, config.density.clone(), &stream);
        LinearModel {
            analysis: Tensor::new(vec![c, BLOCK_DIM], analysis),
            synthesis: Tensor::new(vec![BLOCK_DIM, c], synthesis),
            density,
            config,
        }
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    // -- serialization ------------------------------------------------------

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("analysis".to_string(), &self.analysis),
            ("synthesis".to_string(), &self.synthesis),
        ];
        for (kind, k, t) in self.density.param_tensors() {
            out.push((format!("density.{kind}{k}"), t));
        }
        out
    }

    /// Serializes to the model container: magic, version, length-prefixed
    /// config JSON, named f32 tensor table, SHA-256 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let tensors = self.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0); // dtype f32
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LinearModel, ModelError> {
        if bytes.len() < 4 + 1 + 4 + 32 {
            return Err(ModelError::Truncated);
        }
        if bytes[0..4] != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes[4] != MODEL_VERSION {
            return Err(ModelError::BadVersion(bytes[4]));
        }
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest[..] != bytes[body_len..] {
            return Err(ModelError::HashMismatch);
        }
        let mut pos = 5usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *pos + n > body_len {
                return Err(ModelError::Truncated);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config: RdConfig = serde_json::from_slice(take(&mut pos, cfg_len)?)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(ModelError::BadDtype(dtype));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data));
        }
        let mut get = |name: String, expected: Vec<usize>| -> Result<Tensor, ModelError> {
            let t = tensors.remove(&name).ok_or(ModelError::MissingTensor(name.clone()))?;
            if t.shape() != expected.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    got: t.shape().to_vec(),
                    expected,
                });
            }
            Ok(t)
        };
        let c = config.channels;
        let analysis = get("analysis".into(), vec![c, BLOCK_DIM])?;
        let synthesis = get("synthesis".into(), vec![BLOCK_DIM, c])?;
        let dims = FactorizedDensity::layer_dims(&config.density);
        let mut weight_raw = Vec::new();
        let mut bias = Vec::new();
        let mut gate_raw = Vec::new();
        for (k, &(w_in, w_out)) in dims.iter().enumerate() {
            weight_raw.push(get(format!("density.weight{k}"), vec![c, w_out, w_in])?);
            bias.push(get(format!("density.bias{k}"), vec![c, w_out])?);
            if k + 1 < dims.len() {
                gate_raw.push(get(format!("density.gate{k}"), vec![c, w_out])?);
            }
        }
        let density = FactorizedDensity {
            channels: c,
            config: config.density.clone(),
            weight_raw,
            bias,
            gate_raw,
        };
        Ok(LinearModel { analysis, synthesis, density, config })
    }

    /// First 8 bytes of the SHA-256 of the serialized model; embedded in
    /// every bitstream so decode fails fast on a mismatched model.
    pub fn hash8(&self) -> [u8; 8] {
        let bytes = self.to_bytes();
        bytes[bytes.len() - 32..bytes.len() - 24].try_into().unwrap()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LinearModel, ModelError> {
        let bytes = std::fs::read(path)?;
        LinearModel::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RdConfig {
        let mut cfg = RdConfig::new(CodecMode::UnUqSr, 8, 0.01, 1000, 7);
        cfg.density = DensityConfig { hidden: vec![4, 4], init_scale: 10.0 };
        cfg
    }

    #[test]
    fn analysis_rows_are_orthonormal() {
        let m = LinearModel::init(small_config());
        let a = m.analysis.data();
        let c = m.channels();
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = (0..BLOCK_DIM)
                    .map(|k| a[i * BLOCK_DIM + k] * a[j * BLOCK_DIM + k])
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-5, "gram[{i}][{j}] = {dot}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = LinearModel::init(small_config());
        let b = LinearModel::init(small_config());
        assert_eq!(a.analysis, b.analysis);
        assert_eq!(a.synthesis, b.synthesis);
        let mut other = small_config();
        other.seed = 8;
        let c = LinearModel::init(other);
        assert_ne!(a.analysis, c.analysis);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = LinearModel::init(small_config());
        let bytes1 = m.to_bytes();
        let reloaded = LinearModel::from_bytes(&bytes1).unwrap();
        let bytes2 = reloaded.to_bytes();
        assert_eq!(bytes1, bytes2);
        assert_eq!(m.hash8(), reloaded.hash8());
    }

    #[test]
    fn corrupted_model_file_is_rejected() {
        let m = LinearModel::init(small_config());
        let mut bytes = m.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(LinearModel::from_bytes(&bytes), Err(ModelError::HashMismatch)));
        bytes[mid] ^= 0x40;
        assert!(LinearModel::from_bytes(&bytes).is_ok());
    }

    #[test]
    fn schedules_follow_config() {
        let cfg = RdConfig::new(CodecMode::UnUqSr, 8, 0.04, 20_000, 1);
        assert!((cfg.alpha_at(10_000) - 8.5).abs() < 1e-12);
        assert_eq!(cfg.alpha_at(0), 1.0);
        // Lambda halves at 5% and 10% of the budget.
        assert_eq!(cfg.lambda_at(0), 0.04);
        assert_eq!(cfg.lambda_at(1_000), 0.02);
        assert_eq!(cfg.lambda_at(2_000), 0.01);
        assert_eq!(cfg.lambda_at(19_999), 0.01);
        // Learning rate drops tenfold at 80%.
        assert_eq!(cfg.lr_at(15_999), 1e-4);
        assert!((cfg.lr_at(16_000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn un_modes_have_zero_alpha() {
        let cfg = RdConfig::new(CodecMode::UnUq, 8, 0.01, 1000, 1);
        assert_eq!(cfg.alpha_at(500), 0.0);
        assert_eq!(cfg.alpha_eval, 0.0);
    }
}
