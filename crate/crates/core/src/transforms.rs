//! Orthonormal transform kernels (WHT, DCT, DHT) and their application.
//!
//! Kernels carry their `1/√N` normalization so `HᵀH = I`. The Walsh-Hadamard
//! kernel is never materialized for its power-of-two part: rows are
//! transformed by an in-place add/subtract butterfly, with one dense `m × m`
//! multiply per block when `N = 2^k · m`. DCT and DHT use cached explicit
//! kernels.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Wht,
    Dct,
    Dht,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Wht, TransformKind::Dct, TransformKind::Dht];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Wht => "wht",
            TransformKind::Dct => "dct",
            TransformKind::Dht => "dht",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wht" => Ok(TransformKind::Wht),
            "dct" => Ok(TransformKind::Dct),
            "dht" => Ok(TransformKind::Dht),
            other => Err(Error::InvalidConfig(format!("unknown transform kind {other:?}"))),
        }
    }
}

/// Which product to form against the kernel `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `M · H`
    RightByH,
    /// `M · H⁻¹ = M · Hᵀ`
    RightByHInverse,
    /// `H · M`
    LeftByH,
    /// `H⁻¹ · M = Hᵀ · M`
    LeftByHInverse,
}

#[derive(Debug)]
enum Repr {
    Wht {
        pow2: usize,
        /// Normalized `m × m` factor; `None` when `m == 1`.
        factor: Option<Matrix>,
    },
    Dense(Matrix),
}

#[derive(Debug)]
pub struct TransformPlan {
    kind: TransformKind,
    size: usize,
    repr: Repr,
}

/// Builds a fresh plan. Prefer [`cached_plan`] when the same size is used
/// repeatedly.
pub fn build_plan(kind: TransformKind, n: usize) -> Result<TransformPlan> {
    if n == 0 {
        return Err(Error::InvalidConfig("transform size must be at least 1".into()));
    }
    let repr = match kind {
        TransformKind::Wht => {
            let (pow2, m) = hadamard::factorize(n).ok_or(Error::UnsupportedWhtSize(n))?;
            let factor = if m == 1 {
                None
            } else {
                let raw = hadamard::unnormalized(m).ok_or(Error::UnsupportedWhtSize(n))?;
                let norm = 1.0 / (m as f64).sqrt();
                Some(Matrix::from_vec(m, m, raw.iter().map(|&v| v as f64 * norm).collect())?)
            };
            Repr::Wht { pow2, factor }
        }
        TransformKind::Dct => Repr::Dense(dct_kernel(n)),
        TransformKind::Dht => Repr::Dense(dht_kernel(n)),
    };
    Ok(TransformPlan { kind, size: n, repr })
}

type PlanCache = RwLock<HashMap<(TransformKind, usize), Arc<TransformPlan>>>;

/// Process-wide plan cache keyed by `(kind, size)`.
pub fn cached_plan(kind: TransformKind, n: usize) -> Result<Arc<TransformPlan>> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(plan) = cache.read().unwrap().get(&(kind, n)) {
        return Ok(Arc::clone(plan));
    }
    let plan = Arc::new(build_plan(kind, n)?);
    let mut guard = cache.write().unwrap();
    Ok(Arc::clone(guard.entry((kind, n)).or_insert(plan)))
}

fn dct_kernel(n: usize) -> Matrix {
    let nf = n as f64;
    let dc = 1.0 / nf.sqrt();
    let ac = (2.0 / nf).sqrt();
    Matrix::from_fn(n, n, |j, k| {
        if j == 0 {
            dc
        } else {
            ac * (PI * ((2 * k + 1) * j) as f64 / (2.0 * nf)).cos()
        }
    })
}

fn dht_kernel(n: usize) -> Matrix {
    let norm = 1.0 / (n as f64).sqrt();
    Matrix::from_fn(n, n, |j, k| {
        // Reduce jk mod N before forming the angle to keep it in [0, 2π).
        let x = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
        norm * (x.cos() + x.sin())
    })
}

/// Unnormalized in-place butterfly over `pow2` blocks of `stride`
/// contiguous values each.
fn butterfly(v: &mut [f64], pow2: usize, stride: usize) {
    let mut h = 1;
    while h < pow2 {
        let mut i = 0;
        while i < pow2 {
            for j in i..i + h {
                let (lo, hi) = v.split_at_mut((j + h) * stride);
                let a = &mut lo[j * stride..(j + 1) * stride];
                let b = &mut hi[..stride];
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let s = *x + *y;
                    let d = *x - *y;
                    *x = s;
                    *y = d;
                }
            }
            i += 2 * h;
        }
        h *= 2;
    }
}

/// `block ← block · F` (or `block · Fᵀ` when `transpose`) for each
/// consecutive `m`-block of `v`.
fn apply_factor(v: &mut [f64], factor: &Matrix, transpose: bool, scratch: &mut Vec<f64>) {
    let m = factor.rows();
    scratch.resize(m, 0.0);
    for block in v.chunks_exact_mut(m) {
        for (d, out) in scratch.iter_mut().enumerate() {
            *out = if transpose {
                crate::matrix::dot(block, factor.row(d))
            } else {
                block.iter().enumerate().map(|(b, &x)| x * factor[(b, d)]).sum()
            };
        }
        block.copy_from_slice(scratch);
    }
}

impl TransformPlan {
    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// For WHT plans, the `(2^k, m)` split.
    pub fn wht_factorization(&self) -> Option<(usize, usize)> {
        match &self.repr {
            Repr::Wht { pow2, factor } => Some((*pow2, factor.as_ref().map_or(1, Matrix::rows))),
            Repr::Dense(_) => None,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.size {
            return Err(Error::Shape(format!(
                "{} plan of size {} applied to length {len}",
                self.kind, self.size
            )));
        }
        Ok(())
    }

    /// `v ← v · H` for a row vector.
    pub fn forward_row(&self, v: &mut [f64]) -> Result<()> {
        self.check_len(v.len())?;
        self.row_op(v, false);
        Ok(())
    }

    /// `v ← v · H⁻¹ = v · Hᵀ` for a row vector.
    pub fn inverse_row(&self, v: &mut [f64]) -> Result<()> {
        self.check_len(v.len())?;
        self.row_op(v, true);
        Ok(())
    }

    fn row_op(&self, v: &mut [f64], transpose: bool) {
        let mut scratch = Vec::new();
        match &self.repr {
            Repr::Wht { pow2, factor } => {
                let m = self.size / pow2;
                if let Some(f) = factor {
                    apply_factor(v, f, transpose, &mut scratch);
                }
                // The Sylvester butterfly is its own transpose.
                butterfly(v, *pow2, m);
                let norm = 1.0 / (*pow2 as f64).sqrt();
                if *pow2 > 1 {
                    v.iter_mut().for_each(|x| *x *= norm);
                }
            }
            Repr::Dense(h) => {
                scratch.resize(self.size, 0.0);
                if transpose {
                    for (j, out) in scratch.iter_mut().enumerate() {
                        *out = crate::matrix::dot(v, h.row(j));
                    }
                } else {
                    scratch.iter_mut().for_each(|x| *x = 0.0);
                    for (j, &a) in v.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (o, &hk) in scratch.iter_mut().zip(h.row(j)) {
                            *o += a * hk;
                        }
                    }
                }
                v.copy_from_slice(&scratch);
            }
        }
    }

    fn rows_op(&self, m: &Matrix, transpose: bool) -> Matrix {
        if let Repr::Dense(h) = &self.repr {
            let product = if transpose { m.matmul_transposed(h) } else { m.matmul(h) };
            return product.expect("size checked");
        }
        let mut out = m.clone();
        let cols = out.cols();
        if cols > 0 {
            out.as_mut_slice()
                .par_chunks_mut(cols)
                .for_each(|row| self.row_op(row, transpose));
        }
        out
    }

    /// Multiplies `m` by the kernel on the requested side.
    pub fn apply(&self, m: &Matrix, side: Side) -> Result<Matrix> {
        match side {
            Side::RightByH | Side::RightByHInverse => self.check_len(m.cols())?,
            Side::LeftByH | Side::LeftByHInverse => self.check_len(m.rows())?,
        }
        Ok(match side {
            Side::RightByH => self.rows_op(m, false),
            Side::RightByHInverse => self.rows_op(m, true),
            // H·M = (Mᵀ·Hᵀ)ᵀ and Hᵀ·M = (Mᵀ·H)ᵀ.
            Side::LeftByH => self.rows_op(&m.transpose(), true).transpose(),
            Side::LeftByHInverse => self.rows_op(&m.transpose(), false).transpose(),
        })
    }

    /// The explicit `N × N` kernel. For WHT plans this is assembled from the
    /// Kronecker definition, independently of the butterfly.
    pub fn kernel_matrix(&self) -> Matrix {
        match &self.repr {
            Repr::Dense(h) => h.clone(),
            Repr::Wht { pow2, factor } => {
                let pow_kernel = sylvester_kernel(*pow2);
                match factor {
                    None => pow_kernel,
                    Some(f) => kronecker(&pow_kernel, f),
                }
            }
        }
    }
}

/// Explicit normalized Sylvester kernel from `H_2k = H_2 ⊗ H_k`.
pub fn sylvester_kernel(n: usize) -> Matrix {
    assert!(n.is_power_of_two());
    let h2 = Matrix::from_vec(
        2,
        2,
        vec![1.0, 1.0, 1.0, -1.0]
            .into_iter()
            .map(|v| v / 2f64.sqrt())
            .collect(),
    )
    .unwrap();
    let mut h = Matrix::identity(1);
    let mut size = 1;
    while size < n {
        h = kronecker(&h2, &h);
        size *= 2;
    }
    h
}

pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Normalized fast WHT of `v` in place (`v ← v · H`).
pub fn fast_wht_inplace(v: &mut [f64]) -> Result<()> {
    let plan = cached_plan(TransformKind::Wht, v.len())?;
    plan.forward_row(v)
}
