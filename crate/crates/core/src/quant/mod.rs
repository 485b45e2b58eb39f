//! Importance-matrix calibration and importance-weighted affine block
//! quantization.
//!
//! Each block of `block_size` consecutive weights in a row is stored as
//! `scale * q + min` with `q` in `[0, 2^bits - 1]`. The fit minimizes the
//! importance-weighted squared error, where a column's importance is the mean
//! squared activation seen on that input channel during calibration.

mod format;
pub mod pack;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{read_importance, read_tensor, write_importance, write_tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 32;
pub const DEFAULT_REFINE_ITERS: usize = 5;
pub const DEFAULT_IMPORTANCE_EPSILON: f64 = 1e-8;
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("importance must be positive and finite, index {0}")]
    Importance(usize),
    #[error("unsupported bit width {0}; expected one of 2, 3, 4, 8")]
    Bits(u8),
    #[error("block size {block_size} must be at least 2 and divide the row length {cols}")]
    BlockSize { block_size: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Running sum of squared activations per input column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    sums: Vec<f64>,
    count: u64,
}

impl ImportanceMatrix {
    pub fn new(cols: usize) -> Self {
        ImportanceMatrix {
            sums: vec![0.0; cols],
            count: 0,
        }
    }

    pub fn from_parts(sums: Vec<f64>, count: u64) -> Result<Self, QuantError> {
        if let Some(i) = sums.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(QuantError::NonFinite(i));
        }
        Ok(ImportanceMatrix { sums, count })
    }

    pub fn cols(&self) -> usize {
        self.sums.len()
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn accumulate(&mut self, activation_row: &[f64]) -> Result<(), QuantError> {
        if activation_row.len() != self.sums.len() {
            return Err(QuantError::Length {
                expected: self.sums.len(),
                got: activation_row.len(),
            });
        }
        if let Some(i) = activation_row.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite(i));
        }
        for (s, a) in self.sums.iter_mut().zip(activation_row) {
            *s += a * a;
        }
        self.count += 1;
        Ok(())
    }

    /// Combines statistics gathered on disjoint parts of a corpus.
    pub fn merge(&mut self, other: &ImportanceMatrix) -> Result<(), QuantError> {
        if other.sums.len() != self.sums.len() {
            return Err(QuantError::Length {
                expected: self.sums.len(),
                got: other.sums.len(),
            });
        }
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        self.count += other.count;
        Ok(())
    }

    /// `sums[j] / count + epsilon`; with no rows accumulated every column
    /// gets just `epsilon`, i.e. uniform weighting.
    pub fn column_weights(&self, epsilon: f64) -> Vec<f64> {
        if self.count == 0 {
            return vec![epsilon; self.sums.len()];
        }
        let n = self.count as f64;
        self.sums.iter().map(|s| s / n + epsilon).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u8,
    pub block_size: usize,
    pub refine_iters: usize,
    pub importance_epsilon: f64,
    /// Also refine from the unweighted solution and keep the better fit.
    pub unweighted_start: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            block_size: DEFAULT_BLOCK_SIZE,
            refine_iters: DEFAULT_REFINE_ITERS,
            importance_epsilon: DEFAULT_IMPORTANCE_EPSILON,
            unweighted_start: true,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, block_size: usize) -> Result<Self, QuantError> {
        let c = QuantConfig {
            bits,
            block_size,
            ..QuantConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(QuantError::Bits(self.bits));
        }
        if self.block_size < 2 {
            return Err(QuantError::BlockSize {
                block_size: self.block_size,
                cols: 0,
            });
        }
        if !(self.importance_epsilon.is_finite() && self.importance_epsilon > 0.0) {
            return Err(QuantError::Shape("importance_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn max_code(&self) -> u8 {
        (self.levels() - 1) as u8
    }

    /// Code bits plus two f32 block parameters spread over the block.
    pub fn bits_per_weight(&self) -> f64 {
        f64::from(self.bits) + 64.0 / self.block_size as f64
    }
}

/// Working-precision result of fitting one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub scale: f64,
    pub min: f64,
    pub codes: Vec<u8>,
    /// Weighted error after the initial assignment, then after each
    /// refinement round.
    pub error_trace: Vec<f64>,
}

impl BlockFit {
    pub fn weighted_error(&self) -> f64 {
        *self.error_trace.last().unwrap_or(&0.0)
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&q| self.scale * f64::from(q) + self.min)
            .collect()
    }
}

/// `sum_i m_i (w_i - (scale * q_i + min))^2`
pub fn weighted_error(weights: &[f64], importance: &[f64], codes: &[u8], scale: f64, min: f64) -> f64 {
    weights
        .iter()
        .zip(importance)
        .zip(codes)
        .map(|((w, m), &q)| {
            let d = w - (scale * f64::from(q) + min);
            m * d * d
        })
        .sum()
}

/// Nearest representable level for each weight. `f64::round` rounds half
/// away from zero on every platform.
fn assign_codes(weights: &[f64], scale: f64, min: f64, max_code: u8, codes: &mut [u8]) {
    if scale <= 0.0 {
        codes.fill(0);
        return;
    }
    let top = f64::from(max_code);
    for (c, w) in codes.iter_mut().zip(weights) {
        *c = ((w - min) / scale).round().clamp(0.0, top) as u8;
    }
}

/// Weighted least-squares `(scale, min)` for fixed codes. When all codes are
/// equal the system is singular and the answer is `scale = 0` with `min` the
/// importance-weighted mean of the weights.
pub fn refit(weights: &[f64], importance: &[f64], codes: &[u8]) -> (f64, f64) {
    let total: f64 = importance.iter().sum();
    let mean_q = codes
        .iter()
        .zip(importance)
        .map(|(&q, m)| m * f64::from(q))
        .sum::<f64>()
        / total;
    let mean_w = weights.iter().zip(importance).map(|(w, m)| m * w).sum::<f64>() / total;
    let mut sqq = 0.0;
    let mut sqw = 0.0;
    for ((&q, w), m) in codes.iter().zip(weights).zip(importance) {
        let dq = f64::from(q) - mean_q;
        sqq += m * dq * dq;
        sqw += m * dq * (w - mean_w);
    }
    if codes.iter().all(|&q| q == codes[0]) || sqq <= 0.0 {
        return (0.0, mean_w);
    }
    let scale = sqw / sqq;
    (scale, mean_w - scale * mean_q)
}

fn check_block(weights: &[f64], importance: &[f64], config: &QuantConfig) -> Result<(), QuantError> {
    config.validate()?;
    if weights.len() != config.block_size {
        return Err(QuantError::Length {
            expected: config.block_size,
            got: weights.len(),
        });
    }
    if importance.len() != weights.len() {
        return Err(QuantError::Length {
            expected: weights.len(),
            got: importance.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    if let Some(i) = importance.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(QuantError::Importance(i));
    }
    Ok(())
}

/// Alternates nearest-level assignment and weighted refit, starting from the
/// grid `(scale, min)`. Neither step can raise the weighted error.
fn refine_from(
    weights: &[f64],
    importance: &[f64],
    mut scale: f64,
    mut min: f64,
    max_code: u8,
    rounds: usize,
) -> BlockFit {
    let mut codes = vec![0u8; weights.len()];
    assign_codes(weights, scale, min, max_code, &mut codes);
    let mut trace = vec![weighted_error(weights, importance, &codes, scale, min)];
    for round in 0..rounds {
        if trace.last() == Some(&0.0) {
            break;
        }
        if round > 0 {
            assign_codes(weights, scale, min, max_code, &mut codes);
        }
        let (s, m) = refit(weights, importance, &codes);
        scale = s;
        min = m;
        trace.push(weighted_error(weights, importance, &codes, scale, min));
        if scale == 0.0 {
            break;
        }
    }
    BlockFit {
        scale,
        min,
        codes,
        error_trace: trace,
    }
}

/// Fits one block under the importance weights.
///
/// The first start is the grid spanning `[min(w), max(w)]`. When the
/// importance is not uniform and `config.unweighted_start` is set, a second
/// start is taken from the unweighted fit of the same block and refined under
/// the importance; the fit with the lower weighted error wins (ties keep the
/// first). Either way the winner is never worse, under the true importance,
/// than what the unweighted quantizer produces.
pub fn quantize_block(weights: &[f64], importance: &[f64], config: &QuantConfig) -> Result<BlockFit, QuantError> {
    check_block(weights, importance, config)?;
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(BlockFit {
            scale: 0.0,
            min: lo,
            codes: vec![0; weights.len()],
            error_trace: vec![0.0],
        });
    }
    let max_code = config.max_code();
    let init_scale = (hi - lo) / f64::from(max_code);
    let ranged = refine_from(weights, importance, init_scale, lo, max_code, config.refine_iters);
    let uniform_importance = importance.iter().all(|m| *m == importance[0]);
    if !config.unweighted_start || uniform_importance || ranged.weighted_error() == 0.0 {
        return Ok(ranged);
    }
    let flat = vec![1.0; weights.len()];
    let unweighted = refine_from(weights, &flat, init_scale, lo, max_code, config.refine_iters);
    let warm = refine_from(
        weights,
        importance,
        unweighted.scale,
        unweighted.min,
        max_code,
        config.refine_iters,
    );
    Ok(if warm.weighted_error() < ranged.weighted_error() {
        warm
    } else {
        ranged
    })
}

/// One stored block: f32 affine parameters and packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub scale: f32,
    pub min: f32,
    pub packed: Vec<u8>,
}

impl QuantBlock {
    /// Narrows the fit to f32 and re-picks codes against the narrowed
    /// parameters.
    fn from_fit(fit: &BlockFit, weights: &[f64], bits: u8) -> Self {
        let scale = fit.scale as f32;
        let min = fit.min as f32;
        let mut codes = fit.codes.clone();
        if scale > 0.0 {
            assign_codes(
                weights,
                f64::from(scale),
                f64::from(min),
                ((1u16 << bits) - 1) as u8,
                &mut codes,
            );
        }
        QuantBlock {
            scale,
            min,
            packed: pack::pack_codes(&codes, bits),
        }
    }
}

/// Row-major dense matrix, as read from `{"rows", "cols", "data"}` JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, QuantError> {
        let m = WeightMatrix { rows, cols, data };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.data.len() != self.rows * self.cols {
            return Err(QuantError::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite(i));
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: u8,
    block_size: usize,
    blocks: Vec<QuantBlock>,
}

impl QuantizedTensor {
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        block_size: usize,
        blocks: Vec<QuantBlock>,
    ) -> Result<Self, QuantError> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(QuantError::Bits(bits));
        }
        if block_size < 2 || !cols.is_multiple_of(block_size) {
            return Err(QuantError::BlockSize { block_size, cols });
        }
        let expected = rows * cols / block_size;
        if blocks.len() != expected {
            return Err(QuantError::Shape(format!(
                "expected {expected} blocks, got {}",
                blocks.len()
            )));
        }
        let bytes = pack::packed_len(block_size, bits);
        if blocks.iter().any(|b| b.packed.len() != bytes) {
            return Err(QuantError::Shape(format!("every block needs {bytes} code bytes")));
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            bits,
            block_size,
            blocks,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks(&self) -> &[QuantBlock] {
        &self.blocks
    }

    pub fn block_codes(&self, index: usize) -> Vec<u8> {
        pack::unpack_codes(&self.blocks[index].packed, self.block_size, self.bits)
    }

    pub fn bits_per_weight(&self) -> f64 {
        f64::from(self.bits) + 64.0 / self.block_size as f64
    }
}

/// Quantizes every block of `weights`. Without an importance matrix all
/// columns weigh the same.
pub fn quantize_tensor(
    weights: &WeightMatrix,
    importance: Option<&ImportanceMatrix>,
    config: &QuantConfig,
) -> Result<QuantizedTensor, QuantError> {
    config.validate()?;
    weights.validate()?;
    let bs = config.block_size;
    if !weights.cols.is_multiple_of(bs) {
        return Err(QuantError::BlockSize {
            block_size: bs,
            cols: weights.cols,
        });
    }
    let col_weights = match importance {
        Some(imx) => {
            if imx.cols() != weights.cols {
                return Err(QuantError::Shape(format!(
                    "importance has {} columns, matrix has {}",
                    imx.cols(),
                    weights.cols
                )));
            }
            imx.column_weights(config.importance_epsilon)
        }
        None => vec![1.0; weights.cols],
    };
    let per_row = weights.cols / bs;
    let blocks = weights
        .data
        .par_chunks(bs)
        .enumerate()
        .map(|(i, chunk)| {
            let off = (i % per_row) * bs;
            let m = &col_weights[off..off + bs];
            quantize_block(chunk, m, config).map(|fit| QuantBlock::from_fit(&fit, chunk, config.bits))
        })
        .collect::<Result<Vec<_>, _>>()?;
    QuantizedTensor::from_parts(weights.rows, weights.cols, config.bits, bs, blocks)
}

pub fn dequantize(tensor: &QuantizedTensor) -> WeightMatrix {
    let mut data = Vec::with_capacity(tensor.rows * tensor.cols);
    for (i, b) in tensor.blocks.iter().enumerate() {
        let scale = f64::from(b.scale);
        let min = f64::from(b.min);
        data.extend(tensor.block_codes(i).into_iter().map(|q| scale * f64::from(q) + min));
    }
    WeightMatrix {
        rows: tensor.rows,
        cols: tensor.cols,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub weighted_mse: f64,
    pub unweighted_mse: f64,
    pub bits_per_weight: f64,
}

/// Reconstruction error of `tensor` against `original`, weighting column `j`
/// by its calibration importance.
pub fn quantization_report(
    original: &WeightMatrix,
    tensor: &QuantizedTensor,
    importance: &ImportanceMatrix,
) -> Result<QuantReport, QuantError> {
    original.validate()?;
    if original.rows != tensor.rows || original.cols != tensor.cols {
        return Err(QuantError::Shape(format!(
            "original is {}x{}, tensor is {}x{}",
            original.rows, original.cols, tensor.rows, tensor.cols
        )));
    }
    if importance.cols() != original.cols {
        return Err(QuantError::Shape(format!(
            "importance has {} columns, matrix has {}",
            importance.cols(),
            original.cols
        )));
    }
    let m = importance.column_weights(DEFAULT_IMPORTANCE_EPSILON);
    let recon = dequantize(tensor);
    let mut wsum = 0.0;
    let mut msum = 0.0;
    let mut usum = 0.0;
    for (idx, (w, r)) in original.data.iter().zip(&recon.data).enumerate() {
        let mj = m[idx % original.cols];
        let d2 = (w - r) * (w - r);
        wsum += mj * d2;
        msum += mj;
        usum += d2;
    }
    let n = original.data.len().max(1) as f64;
    Ok(QuantReport {
        weighted_mse: if msum > 0.0 { wsum / msum } else { 0.0 },
        unweighted_mse: usum / n,
        bits_per_weight: tensor.bits_per_weight(),
    })
}
