//! The `SADP` matrix container and a CSV loader for hand-written matrices.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"SADP"`                        |
//! | 4      | 4    | format version (`u32`, currently 1)    |
//! | 8      | 1    | dtype code: 0 = f32, 1 = f64, 2 = u64  |
//! | 9      | 8    | rows (`u64`)                           |
//! | 17     | 8    | cols (`u64`)                           |
//! | 25     | ...  | row-major payload                      |
//!
//! dtype 2 only carries index tables (adapter positions); [`read_matrix`]
//! rejects it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"SADP";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::U64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixFileHeader {
    pub version: u32,
    pub dtype: Dtype,
    pub rows: u64,
    pub cols: u64,
}

impl MatrixFileHeader {
    pub fn payload_len(&self) -> Result<u64> {
        self.rows
            .checked_mul(self.cols)
            .and_then(|n| n.checked_mul(self.dtype.width() as u64))
            .ok_or_else(|| Error::Malformed("header dimensions overflow".into()))
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.code());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::SizeMismatch {
                declared: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let dtype = Dtype::from_code(bytes[8])?;
        let rows = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
        Ok(Self {
            version,
            dtype,
            rows,
            cols,
        })
    }
}

/// Serializes `m` at `dtype` (F32 or F64). Non-finite values, including f64
/// values that overflow f32, are rejected.
pub fn encode_matrix(m: &Matrix, dtype: Dtype) -> Result<Vec<u8>> {
    m.ensure_finite()?;
    let header = MatrixFileHeader {
        version: FORMAT_VERSION,
        dtype,
        rows: m.rows() as u64,
        cols: m.cols() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * dtype.width());
    header.encode(&mut out);
    match dtype {
        Dtype::F64 => {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for (k, &v) in m.as_slice().iter().enumerate() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::NonFinite {
                        row: k / m.cols(),
                        col: k % m.cols(),
                    });
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        Dtype::U64 => {
            return Err(Error::InvalidConfig(
                "real matrices are stored as f32 or f64".into(),
            ))
        }
    }
    Ok(out)
}

/// Parses one SADP record from the start of `bytes`, returning its header,
/// payload slice, and the total number of bytes consumed.
fn split_record<'a>(bytes: &'a [u8], path: &Path) -> Result<(MatrixFileHeader, &'a [u8])> {
    let header = MatrixFileHeader::decode(bytes, path)?;
    let declared = header.payload_len()?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available < declared {
        return Err(Error::SizeMismatch {
            declared,
            actual: available,
        });
    }
    Ok((header, &bytes[HEADER_LEN..HEADER_LEN + declared as usize]))
}

fn decode_real(header: MatrixFileHeader, payload: &[u8]) -> Result<Matrix> {
    let rows = header.rows as usize;
    let cols = header.cols as usize;
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::U64 => {
            return Err(Error::Malformed(
                "index table (u64) where a real matrix was expected".into(),
            ))
        }
    };
    let m = Matrix::from_vec(rows, cols, data)?;
    m.ensure_finite()?;
    Ok(m)
}

/// Decodes a single real matrix that must span all of `bytes`.
pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let (m, used) = decode_matrix_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::SizeMismatch {
            declared: (used - HEADER_LEN) as u64,
            actual: (bytes.len() - HEADER_LEN) as u64,
        });
    }
    Ok(m)
}

/// Decodes a real matrix from the front of `bytes`; returns bytes consumed.
pub fn decode_matrix_prefix(bytes: &[u8]) -> Result<(Matrix, usize)> {
    let (header, payload) = split_record(bytes, Path::new("<memory>"))?;
    let used = HEADER_LEN + payload.len();
    Ok((decode_real(header, payload)?, used))
}

pub fn encode_indices(indices: &[(usize, usize)]) -> Vec<u8> {
    let header = MatrixFileHeader {
        version: FORMAT_VERSION,
        dtype: Dtype::U64,
        rows: indices.len() as u64,
        cols: 2,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + indices.len() * 16);
    header.encode(&mut out);
    for &(r, c) in indices {
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    out
}

/// Decodes a `p × 2` u64 index table from the front of `bytes`.
pub fn decode_indices_prefix(bytes: &[u8]) -> Result<(Vec<(usize, usize)>, usize)> {
    let (header, payload) = split_record(bytes, Path::new("<memory>"))?;
    if header.dtype != Dtype::U64 || header.cols != 2 {
        return Err(Error::Malformed("index table must be u64 with 2 columns".into()));
    }
    let indices = payload
        .chunks_exact(16)
        .map(|c| {
            let r = u64::from_le_bytes(c[0..8].try_into().unwrap()) as usize;
            let col = u64::from_le_bytes(c[8..16].try_into().unwrap()) as usize;
            (r, col)
        })
        .collect();
    Ok((indices, HEADER_LEN + payload.len()))
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_matrix_as(m, path, Dtype::F64)
}

pub fn write_matrix_as(m: &Matrix, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(m, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<MatrixFileHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MatrixFileHeader::decode(&bytes, path)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = MatrixFileHeader::decode(&bytes, path)?;
    let declared = header.payload_len()?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if declared != actual {
        return Err(Error::SizeMismatch { declared, actual });
    }
    decode_real(header, &bytes[HEADER_LEN..])
}

/// Comma-separated values, one matrix row per line, no header row.
/// Blank lines are skipped.
pub fn parse_csv(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|e| {
                    Error::Malformed(format!("line {}: {field:?}: {e}", line_no + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let m = Matrix::from_rows(&rows)?;
    m.ensure_finite()?;
    Ok(m)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// Reads either format, dispatching on the `.csv` extension.
pub fn read_any(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv(path),
        _ => read_matrix(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sadp");
        write_matrix(&Matrix::zeros(1, 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(&bytes[0..4], b"SADP");
        assert_eq!(bytes[8], 1);
    }

    #[test]
    fn zero_payload() {
        let bytes = encode_matrix(&Matrix::zeros(2, 3), Dtype::F64).unwrap();
        assert_eq!(bytes.len() - HEADER_LEN, 48);
        assert!(bytes[HEADER_LEN..].iter().all(|&b| b == 0));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sadp");
        let mut bytes = encode_matrix(&Matrix::zeros(1, 1), Dtype::F64).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode_matrix(&Matrix::zeros(1, 1), Dtype::F64).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_matrix(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn f32_widening_is_exact() {
        let m = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let bytes = encode_matrix(&m, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(decode_matrix(&bytes).unwrap()[(0, 0)], 1.5);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sadp");
        let mut bytes = encode_matrix(&Matrix::zeros(2, 2), Dtype::F64).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_matrix(&Matrix::zeros(2, 2), Dtype::F64).unwrap();
        bytes.push(0);
        assert!(matches!(decode_matrix(&bytes), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn non_finite_rejected_both_ways() {
        let m = Matrix::from_vec(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(
            encode_matrix(&m, Dtype::F64),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let huge = Matrix::from_vec(1, 1, vec![1e300]).unwrap();
        assert!(encode_matrix(&huge, Dtype::F32).is_err());

        let mut bytes = encode_matrix(&Matrix::zeros(1, 2), Dtype::F64).unwrap();
        bytes[HEADER_LEN + 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_matrix(&bytes), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn index_table_round_trip() {
        let idx = vec![(0, 3), (7, 1), (2, 2)];
        let bytes = encode_indices(&idx);
        let (back, used) = decode_indices_prefix(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(used, bytes.len());
        assert!(decode_matrix(&bytes).is_err());
    }

    #[test]
    fn csv_parsing() {
        let m = parse_csv("1, 2,3\n\n4,5,6.5\n").unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m[(1, 2)], 6.5);
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,abc\n").is_err());
        assert!(parse_csv("1,NaN\n").is_err());
    }
}
