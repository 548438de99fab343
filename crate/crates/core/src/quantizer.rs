//! Group-wise asymmetric round-to-nearest weight quantization.
//!
//! Each output channel (row) is split into contiguous groups of `group_size`
//! input columns; the last group may be shorter. Per group:
//!
//! ```text
//! s = (max - min) / (2^n - 1),  z = round(min / s)
//! code = clamp(round(w / s) - z, 0, 2^n - 1)
//! w_q  = (code + z) · s
//! ```
//!
//! `round` is half-away-from-zero (`f64::round`). A constant group gets
//! `s = 1`, `z = round(min)`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 64,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        let cfg = Self { bits, group_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bit-width must be in 2..=8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group size must be positive".into()));
        }
        Ok(())
    }

    /// Largest code, `2^n - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    /// `rows × groups_per_row`, row-major.
    scales: Vec<f64>,
    zero_points: Vec<i64>,
    config: QuantConfig,
}

impl QuantizedLayer {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    pub fn groups_per_row(&self) -> usize {
        self.config.groups_per_row(self.cols)
    }

    /// Scale and zero-point governing entry `(i, j)`.
    pub fn group_params(&self, i: usize, j: usize) -> (f64, i64) {
        let g = i * self.groups_per_row() + j / self.config.group_size;
        (self.scales[g], self.zero_points[g])
    }
}

/// Scale and zero-point for one group by asymmetric min-max.
pub fn min_max_params(values: &[f64], bits: u8) -> (f64, i64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return (1.0, lo.round() as i64);
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let s = (hi - lo) / levels;
    (s, (lo / s).round() as i64)
}

/// `round(w / s) - z` before clamping.
#[inline]
pub fn pre_clamp_code(w: f64, s: f64, z: i64) -> f64 {
    (w / s).round() - z as f64
}

#[inline]
fn encode(w: f64, s: f64, z: i64, max_code: u8) -> u8 {
    pre_clamp_code(w, s, z).clamp(0.0, max_code as f64) as u8
}

/// Quantizes with min-max group parameters.
pub fn quantize(w: &Matrix, cfg: QuantConfig) -> Result<QuantizedLayer> {
    cfg.validate()?;
    w.ensure_finite()?;
    let groups = cfg.groups_per_row(w.cols());
    let params: Vec<(f64, i64)> = (0..w.rows())
        .into_par_iter()
        .flat_map_iter(|i| {
            w.row(i)
                .chunks(cfg.group_size)
                .map(|g| min_max_params(g, cfg.bits))
                .collect::<Vec<_>>()
        })
        .collect();
    debug_assert_eq!(params.len(), w.rows() * groups);
    let (scales, zero_points) = params.into_iter().unzip::<_, _, Vec<_>, Vec<_>>();
    quantize_with(w, cfg, &scales, &zero_points)
}

/// Quantizes with caller-supplied per-group scales and zero-points
/// (`rows × groups_per_row`, row-major).
pub fn quantize_with(
    w: &Matrix,
    cfg: QuantConfig,
    scales: &[f64],
    zero_points: &[i64],
) -> Result<QuantizedLayer> {
    cfg.validate()?;
    w.ensure_finite()?;
    let (rows, cols) = w.shape();
    let groups = cfg.groups_per_row(cols);
    if scales.len() != rows * groups || zero_points.len() != rows * groups {
        return Err(Error::Shape(format!(
            "expected {} group parameters, got {} scales and {} zero-points",
            rows * groups,
            scales.len(),
            zero_points.len()
        )));
    }
    if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidConfig(format!("scale must be positive, got {bad}")));
    }
    let max_code = cfg.max_code();
    let mut codes = vec![0u8; rows * cols];
    if cols > 0 {
        codes
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, out)| {
                for (j, c) in out.iter_mut().enumerate() {
                    let g = i * groups + j / cfg.group_size;
                    *c = encode(w[(i, j)], scales[g], zero_points[g], max_code);
                }
            });
    }
    Ok(QuantizedLayer {
        rows,
        cols,
        codes,
        scales: scales.to_vec(),
        zero_points: zero_points.to_vec(),
        config: cfg,
    })
}

pub fn dequantize(q: &QuantizedLayer) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        let (s, z) = q.group_params(i, j);
        (q.codes[i * q.cols + j] as f64 + z as f64) * s
    })
}

/// `ΔW_Q = W₀ − W_Q`.
pub fn quant_error(w: &Matrix, q: &QuantizedLayer) -> Result<Matrix> {
    if w.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} vs quantized layer {:?}",
            w.shape(),
            q.shape()
        )));
    }
    w.sub(&dequantize(q))
}

/// `true` where the pre-clamp code fell outside `[0, 2^n − 1]`.
pub fn clamped_mask(w: &Matrix, q: &QuantizedLayer) -> Vec<bool> {
    let max_code = q.config.max_code() as f64;
    (0..q.rows)
        .flat_map(|i| (0..q.cols).map(move |j| (i, j)))
        .map(|(i, j)| {
            let (s, z) = q.group_params(i, j);
            let c = pre_clamp_code(w[(i, j)], s, z);
            !(0.0..=max_code).contains(&c)
        })
        .collect()
}

const QUANT_MAGIC: [u8; 4] = *b"SADQ";
const QUANT_VERSION: u32 = 1;

/// Layout: magic `SADQ`, version u32, bits u8, group-size u64, rows u64,
/// cols u64, then codes (u8, row-major), scales (f64), zero-points (f64),
/// all little-endian.
pub fn encode_quantized(q: &QuantizedLayer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&QUANT_MAGIC);
    out.extend_from_slice(&QUANT_VERSION.to_le_bytes());
    out.push(q.config.bits);
    out.extend_from_slice(&(q.config.group_size as u64).to_le_bytes());
    out.extend_from_slice(&(q.rows as u64).to_le_bytes());
    out.extend_from_slice(&(q.cols as u64).to_le_bytes());
    out.extend_from_slice(&q.codes);
    for s in &q.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &z in &q.zero_points {
        out.extend_from_slice(&(z as f64).to_le_bytes());
    }
    out
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedLayer> {
    const HEADER: usize = 4 + 4 + 1 + 8 + 8 + 8;
    if bytes.len() < HEADER {
        return Err(Error::SizeMismatch {
            declared: HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != QUANT_MAGIC {
        return Err(Error::BadMagic {
            path: "<quantized layer>".into(),
            expected: QUANT_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != QUANT_VERSION {
        return Err(Error::VersionMismatch {
            expected: QUANT_VERSION,
            found: version,
        });
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let config = QuantConfig {
        bits: bytes[8],
        group_size: read_u64(9),
    };
    config.validate()?;
    let rows = read_u64(17);
    let cols = read_u64(25);
    let groups = config.groups_per_row(cols);
    let n_codes = rows * cols;
    let n_groups = rows * groups;
    let declared = (n_codes + 16 * n_groups) as u64;
    let actual = (bytes.len() - HEADER) as u64;
    if declared != actual {
        return Err(Error::SizeMismatch { declared, actual });
    }
    let codes = bytes[HEADER..HEADER + n_codes].to_vec();
    if let Some(&c) = codes.iter().find(|&&c| c > config.max_code()) {
        return Err(Error::Malformed(format!("code {c} exceeds {}-bit range", config.bits)));
    }
    let tail = &bytes[HEADER + n_codes..];
    let floats: Vec<f64> = tail
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (scales, zeros) = floats.split_at(n_groups);
    if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Malformed("non-positive or non-finite scale".into()));
    }
    if zeros.iter().any(|z| !z.is_finite() || z.fract() != 0.0) {
        return Err(Error::Malformed("zero-points must be integers".into()));
    }
    Ok(QuantizedLayer {
        rows,
        cols,
        codes,
        scales: scales.to_vec(),
        zero_points: zeros.iter().map(|&z| z as i64).collect(),
        config,
    })
}

pub fn write_quantized(q: &QuantizedLayer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_quantized(q)).map_err(|e| Error::io(path, e))
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedLayer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_quantized(&bytes)
}
