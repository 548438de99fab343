//! Sparse spectral adapters `ΔW = α · F · H⁻¹`.
//!
//! `F` is stored as parallel arrays of values `c` and positions `E`, kept in
//! insertion order. The two-sided form `ΔW = α · H′⁻¹ · F · H⁻¹` (with `H′`
//! of size `d_out`) is supported for DCT/DHT comparisons.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::{self, Dtype};
use crate::transforms::{cached_plan, Side, TransformKind, TransformPlan};

pub const ADAPTER_MAGIC: [u8; 4] = *b"SADA";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdapter {
    d_out: usize,
    d_in: usize,
    values: Vec<f64>,
    indices: Vec<(usize, usize)>,
    kernel: TransformKind,
    two_sided: bool,
    alpha: f64,
}

/// Builds a single-transform adapter with `α = 1`.
pub fn scatter(
    values: Vec<f64>,
    indices: Vec<(usize, usize)>,
    shape: (usize, usize),
    kernel: TransformKind,
) -> Result<SparseAdapter> {
    SparseAdapter::new(shape, values, indices, kernel, false, 1.0)
}

impl SparseAdapter {
    pub fn new(
        shape: (usize, usize),
        values: Vec<f64>,
        indices: Vec<(usize, usize)>,
        kernel: TransformKind,
        two_sided: bool,
        alpha: f64,
    ) -> Result<Self> {
        let (d_out, d_in) = shape;
        if values.len() != indices.len() {
            return Err(Error::InvalidIndex(format!(
                "{} values for {} indices",
                values.len(),
                indices.len()
            )));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: bad, col: 0 });
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &(r, c) in &indices {
            if r >= d_out || c >= d_in {
                return Err(Error::InvalidIndex(format!(
                    "position ({r}, {c}) outside {d_out}×{d_in}"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::InvalidIndex(format!("duplicate position ({r}, {c})")));
            }
        }
        Ok(Self {
            d_out,
            d_in,
            values,
            indices,
            kernel,
            two_sided,
            alpha,
        })
    }

    pub fn zero(shape: (usize, usize), kernel: TransformKind) -> Self {
        Self {
            d_out: shape.0,
            d_in: shape.1,
            values: Vec::new(),
            indices: Vec::new(),
            kernel,
            two_sided: false,
            alpha: 1.0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out, self.d_in)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    /// Number of trainable coefficients `p`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kernel(&self) -> TransformKind {
        self.kernel
    }

    pub fn two_sided(&self) -> bool {
        self.two_sided
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same positions and values with a different `α`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.shape(),
            self.values.clone(),
            self.indices.clone(),
            self.kernel,
            self.two_sided,
            alpha,
        )
    }

    /// Dense `F` (without `α`).
    pub fn coefficient_matrix(&self) -> Matrix {
        let mut f = Matrix::zeros(self.d_out, self.d_in);
        for (&(r, c), &v) in self.indices.iter().zip(&self.values) {
            f[(r, c)] = v;
        }
        f
    }

    /// `α·F·H⁻¹`, or `α·H′⁻¹·F·H⁻¹` when two-sided.
    pub fn materialize_delta(&self, plan: &TransformPlan, left: Option<&TransformPlan>) -> Result<Matrix> {
        self.check_plans(plan, left)?;
        let f = self.coefficient_matrix().scale(self.alpha);
        let mut delta = plan.apply(&f, Side::RightByHInverse)?;
        if self.two_sided {
            let left = left.expect("checked above");
            delta = left.apply(&delta, Side::LeftByHInverse)?;
        }
        Ok(delta)
    }

    /// [`Self::materialize_delta`] with plans taken from the process cache.
    pub fn materialize(&self) -> Result<Matrix> {
        let plan = cached_plan(self.kernel, self.d_in)?;
        if self.two_sided {
            let left = cached_plan(self.kernel, self.d_out)?;
            self.materialize_delta(&plan, Some(&left))
        } else {
            self.materialize_delta(&plan, None)
        }
    }

    /// `(W_Q + ΔW)·X`.
    pub fn forward(
        &self,
        plan: &TransformPlan,
        left: Option<&TransformPlan>,
        w_q: &Matrix,
        x: &Matrix,
    ) -> Result<Matrix> {
        if w_q.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "weights {:?} vs adapter {:?}",
                w_q.shape(),
                self.shape()
            )));
        }
        let delta = self.materialize_delta(plan, left)?;
        w_q.add(&delta)?.matmul(x)
    }

    fn check_plans(&self, plan: &TransformPlan, left: Option<&TransformPlan>) -> Result<()> {
        if plan.kind() != self.kernel {
            return Err(Error::InvalidConfig(format!(
                "adapter uses {} but plan is {}",
                self.kernel,
                plan.kind()
            )));
        }
        if plan.size() != self.d_in {
            return Err(Error::Shape(format!(
                "plan size {} does not match d_in = {}",
                plan.size(),
                self.d_in
            )));
        }
        if self.two_sided {
            let left = left.ok_or_else(|| {
                Error::InvalidConfig("two-sided adapter needs a left plan".into())
            })?;
            if left.kind() != self.kernel || left.size() != self.d_out {
                return Err(Error::Shape(format!(
                    "left plan {}/{} does not match {}/{}",
                    left.kind(),
                    left.size(),
                    self.kernel,
                    self.d_out
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    d_out: usize,
    d_in: usize,
    kernel: TransformKind,
    alpha: f64,
    p: usize,
    two_sided: bool,
}

/// `"SADA"`, u32 version, u64 header length, JSON header, then `c` (p×1 f64)
/// and `E` (p×2 u64) as SADP blocks.
pub fn encode_adapter(a: &SparseAdapter) -> Result<Vec<u8>> {
    let header = AdapterHeader {
        d_out: a.d_out,
        d_in: a.d_in,
        kernel: a.kernel,
        alpha: a.alpha,
        p: a.len(),
        two_sided: a.two_sided,
    };
    let json = serde_json::to_vec(&header).expect("plain struct");
    let values = Matrix::from_vec(a.len(), 1, a.values.clone())?;
    let mut out = Vec::new();
    out.extend_from_slice(&ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&tensor_io::encode_matrix(&values, Dtype::F64)?);
    out.extend_from_slice(&tensor_io::encode_indices(&a.indices));
    Ok(out)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<SparseAdapter> {
    decode_adapter_from(bytes, Path::new("<memory>"))
}

fn decode_adapter_from(bytes: &[u8], path: &Path) -> Result<SparseAdapter> {
    if bytes.len() < 16 {
        return Err(Error::SizeMismatch {
            declared: 16,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != ADAPTER_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: ADAPTER_MAGIC,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ADAPTER_VERSION {
        return Err(Error::VersionMismatch {
            expected: ADAPTER_VERSION,
            found: version,
        });
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < json_len {
        return Err(Error::SizeMismatch {
            declared: json_len as u64,
            actual: rest.len() as u64,
        });
    }
    let header: AdapterHeader = serde_json::from_slice(&rest[..json_len])
        .map_err(|e| Error::Malformed(format!("adapter header: {e}")))?;
    let rest = &rest[json_len..];
    let (values, used) = tensor_io::decode_matrix_prefix(rest)?;
    let (indices, used_e) = tensor_io::decode_indices_prefix(&rest[used..])?;
    if used + used_e != rest.len() {
        return Err(Error::SizeMismatch {
            declared: (used + used_e) as u64,
            actual: rest.len() as u64,
        });
    }
    if values.cols() != 1 || values.rows() != header.p || indices.len() != header.p {
        return Err(Error::Malformed(format!(
            "header declares p = {} but payload holds {}×{} values and {} indices",
            header.p,
            values.rows(),
            values.cols(),
            indices.len()
        )));
    }
    SparseAdapter::new(
        (header.d_out, header.d_in),
        values.into_vec(),
        indices,
        header.kernel,
        header.two_sided,
        header.alpha,
    )
}

pub fn write_adapter(a: &SparseAdapter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_adapter(a)?).map_err(|e| Error::io(path, e))
}

pub fn read_adapter(path: impl AsRef<Path>) -> Result<SparseAdapter> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter_from(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::build_plan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn dense(m: &Matrix, kernel: TransformKind) -> SparseAdapter {
        let (r, c) = m.shape();
        let idx: Vec<_> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
        scatter(m.as_slice().to_vec(), idx, (r, c), kernel).unwrap()
    }

    #[test]
    fn single_placement() {
        let a = scatter(vec![5.0], vec![(0, 0)], (2, 2), TransformKind::Wht).unwrap();
        assert_eq!(
            a.coefficient_matrix(),
            Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 0.0]]).unwrap()
        );
    }

    #[test]
    fn empty_and_zero() {
        let a = scatter(vec![], vec![], (3, 4), TransformKind::Wht).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.materialize().unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn rejects_bad_positions() {
        let dup = scatter(vec![1.0, 2.0], vec![(1, 1), (1, 1)], (2, 2), TransformKind::Wht);
        assert!(matches!(dup, Err(Error::InvalidIndex(_))));
        let out = scatter(vec![1.0], vec![(2, 0)], (2, 2), TransformKind::Wht);
        assert!(matches!(out, Err(Error::InvalidIndex(_))));
        let len = scatter(vec![1.0], vec![], (2, 2), TransformKind::Wht);
        assert!(len.is_err());
        let alpha = SparseAdapter::new((2, 2), vec![], vec![], TransformKind::Wht, false, 0.0);
        assert!(alpha.is_err());
    }

    #[test]
    fn order_is_preserved() {
        let idx = vec![(1, 0), (0, 1), (0, 0)];
        let a = scatter(vec![1.0, 2.0, 3.0], idx.clone(), (2, 2), TransformKind::Dct).unwrap();
        assert_eq!(a.indices(), idx.as_slice());
        assert_eq!(a.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_multiply_wht2() {
        let c0 = 3.0;
        let a = scatter(vec![c0], vec![(0, 0)], (2, 2), TransformKind::Wht).unwrap();
        let plan = build_plan(TransformKind::Wht, 2).unwrap();
        let d = a.materialize_delta(&plan, None).unwrap();
        let h = c0 / 2f64.sqrt();
        assert!((d[(0, 0)] - h).abs() < 1e-15 && (d[(0, 1)] - h).abs() < 1e-15);
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn dense_coefficients_invert_the_transform() {
        for kind in TransformKind::ALL {
            let m = random(6, 12, 3);
            let plan = build_plan(kind, 12).unwrap();
            let f = plan.apply(&m, Side::RightByH).unwrap();
            let delta = dense(&f, kind).materialize_delta(&plan, None).unwrap();
            assert!(delta.max_abs_diff(&m) < 1e-9, "{kind}");
        }
    }

    #[test]
    fn two_sided_matches_explicit_product() {
        let kind = TransformKind::Dht;
        let f = random(4, 8, 5);
        let a = SparseAdapter::new((4, 8), f.as_slice().to_vec(), dense(&f, kind).indices().to_vec(), kind, true, 2.0)
            .unwrap();
        let right = build_plan(kind, 8).unwrap();
        let left = build_plan(kind, 4).unwrap();
        let got = a.materialize_delta(&right, Some(&left)).unwrap();
        let expected = left
            .kernel_matrix()
            .transpose()
            .matmul(&f)
            .unwrap()
            .matmul(&right.kernel_matrix().transpose())
            .unwrap()
            .scale(2.0);
        assert!(got.max_abs_diff(&expected) < 1e-12);
        assert!(a.materialize_delta(&right, None).is_err());
    }

    #[test]
    fn linear_in_alpha_and_energy_preserving() {
        let plan = build_plan(TransformKind::Wht, 16).unwrap();
        let a = scatter(vec![1.5, -2.0, 0.25], vec![(0, 3), (2, 9), (3, 0)], (4, 16), TransformKind::Wht).unwrap();
        let d1 = a.materialize_delta(&plan, None).unwrap();
        let d3 = a.with_alpha(3.0).unwrap().materialize_delta(&plan, None).unwrap();
        assert!(d3.max_abs_diff(&d1.scale(3.0)) < 1e-14);
        let rel = (d1.frobenius() - a.coefficient_matrix().frobenius()).abs() / d1.frobenius();
        assert!(rel < 1e-12);
    }

    #[test]
    fn forward_matches_two_step() {
        let plan = build_plan(TransformKind::Wht, 8).unwrap();
        let w = random(4, 8, 7);
        let a = scatter(vec![1.0, -1.0], vec![(0, 1), (3, 7)], (4, 8), TransformKind::Wht).unwrap();
        let y = a.forward(&plan, None, &w, &Matrix::identity(8)).unwrap();
        let expected = w.add(&a.materialize_delta(&plan, None).unwrap()).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-14);
        let zero = SparseAdapter::zero((4, 8), TransformKind::Wht);
        let x = random(8, 5, 8);
        assert_eq!(zero.forward(&plan, None, &w, &x).unwrap(), w.matmul(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sada");
        let a = SparseAdapter::new((4, 4), vec![0.5, -1.0], vec![(3, 2), (0, 1)], TransformKind::Dct, true, 4000.0)
            .unwrap();
        write_adapter(&a, &path).unwrap();
        assert_eq!(read_adapter(&path).unwrap(), a);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(decode_adapter(&bytes).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_adapter(&bytes), Err(Error::BadMagic { .. })));
    }
}
