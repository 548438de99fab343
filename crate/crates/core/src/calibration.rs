//! Activation statistics and the calibration factor `R`.
//!
//! The output error `‖(ΔW_Q − ΔW) X‖_F²` only depends on `X` through the Gram
//! matrix `X Xᵀ`. Factorizing `X Xᵀ = U Σ Uᵀ` and setting `R = U Σ^{1/2}` turns
//! it into the weighted Frobenius problem `‖(ΔW_Q − ΔW) R‖_F²`, so any number of
//! activation batches collapse into one `d_in × d_in` factor.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse_adapter::SparseAdapter;
use crate::tensor_io;

/// Eigenvalue floor (relative to `trace / d`) below which `X Xᵀ` is treated
/// as singular.
pub const SINGULAR_FLOOR: f64 = 1e-12;
/// Ridge added when singular: `λ = RIDGE_FACTOR · trace / d_in`.
pub const RIDGE_FACTOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GramAccumulator {
    dim: usize,
    gram: Matrix,
    sample_count: u64,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: Matrix::zeros(dim, dim),
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// `gram += x xᵀ` for a `dim × samples` batch.
    pub fn accumulate(&mut self, x: &Matrix) -> Result<()> {
        if x.rows() != self.dim {
            return Err(Error::Shape(format!(
                "activation batch has {} rows, accumulator dimension is {}",
                x.rows(),
                self.dim
            )));
        }
        x.ensure_finite()?;
        let outer = x.matmul_transposed(x)?;
        self.gram = self.gram.add(&outer)?;
        self.sample_count += x.cols() as u64;
        Ok(())
    }

    pub fn factorize(&self) -> Result<CalibrationFactor> {
        if self.sample_count == 0 {
            return Err(Error::Numerical("no activations accumulated".into()));
        }
        factorize_gram(&self.gram, self.sample_count)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationFactor {
    r: Matrix,
    lambda_used: f64,
    sample_count: u64,
    /// Eigenvalues of `R Rᵀ` (after any ridge), ascending.
    eigenvalues: Vec<f64>,
}

/// Eigendecomposes a symmetric PSD Gram matrix into `R = U Σ^{1/2}`,
/// adding the ridge only when the smallest eigenvalue is at or below the
/// relative floor.
pub fn factorize_gram(gram: &Matrix, sample_count: u64) -> Result<CalibrationFactor> {
    let d = gram.rows();
    if d == 0 || gram.cols() != d {
        return Err(Error::Shape(format!("Gram matrix must be square, got {:?}", gram.shape())));
    }
    let trace = gram.trace();
    if !trace.is_finite() || trace <= 0.0 {
        return Err(Error::Numerical("Gram matrix carries no signal (zero trace)".into()));
    }
    let eig = SymmetricEigen::new(gram.to_nalgebra());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let smallest = eig.eigenvalues[order[0]];
    let lambda = if smallest <= SINGULAR_FLOOR * trace / d as f64 {
        RIDGE_FACTOR * trace / d as f64
    } else {
        0.0
    };
    let mut r = Matrix::zeros(d, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for (col, &k) in order.iter().enumerate() {
        // Negative round-off is clipped before the ridge is added.
        let value = eig.eigenvalues[k].max(0.0) + lambda;
        if value.is_nan() || value <= 0.0 {
            return Err(Error::Numerical("calibration factor is singular".into()));
        }
        eigenvalues.push(value);
        let root = value.sqrt();
        for i in 0..d {
            r[(i, col)] = eig.eigenvectors[(i, k)] * root;
        }
    }
    Ok(CalibrationFactor {
        r,
        lambda_used: lambda,
        sample_count,
        eigenvalues,
    })
}

impl CalibrationFactor {
    /// Wraps an existing factor (e.g. one read from disk).
    pub fn from_parts(r: Matrix, lambda_used: f64, sample_count: u64) -> Result<Self> {
        if r.rows() != r.cols() {
            return Err(Error::Shape(format!("R must be square, got {:?}", r.shape())));
        }
        r.ensure_finite()?;
        let gram = r.matmul_transposed(&r)?;
        let eig = SymmetricEigen::new(gram.to_nalgebra());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Self {
            r,
            lambda_used,
            sample_count,
            eigenvalues,
        })
    }

    /// `R = I`: the unweighted Frobenius objective.
    pub fn identity(dim: usize) -> Self {
        Self {
            r: Matrix::identity(dim),
            lambda_used: 0.0,
            sample_count: 0,
            eigenvalues: vec![1.0; dim],
        }
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    pub fn lambda_used(&self) -> f64 {
        self.lambda_used
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Condition number of `R Rᵀ`. Every principal submatrix of
    /// `Hᵀ R Rᵀ H` is bounded by it (eigenvalue interlacing).
    pub fn gram_condition(&self) -> f64 {
        let lo = self.eigenvalues.first().copied().unwrap_or(0.0);
        let hi = self.eigenvalues.last().copied().unwrap_or(0.0);
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// `R Rᵀ`, the (possibly regularized) Gram matrix.
    pub fn gram(&self) -> Matrix {
        self.r.matmul_transposed(&self.r).expect("square factor")
    }

    /// `‖M R‖_F²`.
    pub fn weighted_frobenius_sq(&self, m: &Matrix) -> Result<f64> {
        Ok(m.matmul(&self.r)?.frobenius_sq())
    }
}

/// `‖(ΔW_Q − α F H⁻¹) R‖_F²`.
pub fn reduced_objective(dw: &Matrix, adapter: &SparseAdapter, calib: &CalibrationFactor) -> Result<f64> {
    if dw.shape() != adapter.shape() {
        return Err(Error::Shape(format!(
            "error matrix {:?} vs adapter {:?}",
            dw.shape(),
            adapter.shape()
        )));
    }
    if calib.dim() != dw.cols() {
        return Err(Error::Shape(format!(
            "calibration factor of dimension {} for d_in = {}",
            calib.dim(),
            dw.cols()
        )));
    }
    let delta = adapter.materialize()?;
    calib.weighted_frobenius_sq(&dw.sub(&delta)?)
}

/// `‖(ΔW_Q − ΔW) X‖_F²` evaluated directly on activations.
pub fn raw_objective(dw: &Matrix, delta: &Matrix, x: &Matrix) -> Result<f64> {
    Ok(dw.sub(delta)?.matmul(x)?.frobenius_sq())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    lambda_used: f64,
    sample_count: u64,
}

/// `<r path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `R` as SADP plus a JSON sidecar with `lambda_used` and
/// `sample_count`.
pub fn write_calibration(calib: &CalibrationFactor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_io::write_matrix(&calib.r, path)?;
    let sidecar = Sidecar {
        dim: calib.dim(),
        lambda_used: calib.lambda_used,
        sample_count: calib.sample_count,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("plain struct");
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

/// Reads a factor written by [`write_calibration`]. A missing sidecar is an
/// I/O error.
pub fn read_calibration(path: impl AsRef<Path>) -> Result<CalibrationFactor> {
    let path = path.as_ref();
    let r = tensor_io::read_matrix(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", side.display())))?;
    if sidecar.dim != r.rows() {
        return Err(Error::Malformed(format!(
            "sidecar dimension {} does not match R ({})",
            sidecar.dim,
            r.rows()
        )));
    }
    CalibrationFactor::from_parts(r, sidecar.lambda_used, sidecar.sample_count)
}
