//! Binary matrix container and quantized-pool files.
//!
//! Matrix layout: magic `SLCS`, u8 version (1), u8 dtype (0 = f32,
//! 1 = f64), u32 rows, u64 columns, then the column-major payload. All
//! integers and floats are little-endian.
//!
//! Quantized pools: magic `SLCQ`, u8 version (1), u32 tokens, u64 items,
//! the 32-byte SHA-256 of the codebook container, then u16 codeword ids,
//! column-major by item.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};
use crate::pq::QuantizedPool;

const MAGIC: &[u8; 4] = b"SLCS";
const QUANT_MAGIC: &[u8; 4] = b"SLCQ";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 8;
const QUANT_HEADER_LEN: usize = 4 + 1 + 4 + 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serializes `m`. With [`Dtype::F32`] values are rounded to single
/// precision.
pub fn encode_matrix(m: &DMatrix<f64>, dtype: Dtype) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| Error::Invalid(format!("{} rows exceed the container limit", m.nrows())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => m.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => m.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses a container; `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<(DMatrix<f64>, Dtype)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a matrix container (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported container version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(bad(format!("unknown dtype code {other}"))),
    };
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let cols = usize::try_from(cols).map_err(|_| bad("column count overflows".into()))?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| bad("payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((DMatrix::from_vec(rows, cols, values), dtype))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, dtype: Dtype) -> Result<()> {
    atomic_write(path, &encode_matrix(m, dtype)?)
}

pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Dtype)> {
    decode_matrix(&read_file(path)?, path)
}

/// Reads only the header: `(rows, columns, dtype)`.
pub fn read_matrix_header(path: &Path) -> Result<(usize, usize, Dtype)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != MAGIC || head[4] != VERSION {
        return Err(Error::format(path, "not a matrix container"));
    }
    let dtype = if head[5] == 0 { Dtype::F32 } else { Dtype::F64 };
    let rows = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(head[10..18].try_into().unwrap()) as usize;
    Ok((rows, cols, dtype))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

pub fn encode_quantized(pool: &QuantizedPool, codebook_sha: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(QUANT_HEADER_LEN + 2 * pool.indices().len());
    out.extend_from_slice(QUANT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(pool.tokens() as u32).to_le_bytes());
    out.extend_from_slice(&(pool.len() as u64).to_le_bytes());
    out.extend_from_slice(codebook_sha);
    for &k in pool.indices() {
        out.extend_from_slice(&k.to_le_bytes());
    }
    out
}

/// Returns the pool and the codebook hash it was built with.
pub fn decode_quantized(bytes: &[u8], path: &Path) -> Result<(QuantizedPool, [u8; 32])> {
    if bytes.len() < QUANT_HEADER_LEN || &bytes[..4] != QUANT_MAGIC {
        return Err(Error::format(path, "not a quantized pool (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let tokens = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let items = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let sha: [u8; 32] = bytes[17..49].try_into().unwrap();
    let payload = &bytes[QUANT_HEADER_LEN..];
    if Some(payload.len()) != tokens.checked_mul(items).and_then(|n| n.checked_mul(2)) {
        return Err(Error::format(path, "payload size does not match the header"));
    }
    let indices = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let pool = QuantizedPool::new(tokens, indices).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((pool, sha))
}

/// Writes a quantized pool that references the codebook stored at
/// `codebook_path`.
pub fn write_quantized(path: &Path, pool: &QuantizedPool, codebook_path: &Path) -> Result<()> {
    let sha: [u8; 32] = Sha256::digest(read_file(codebook_path)?).into();
    atomic_write(path, &encode_quantized(pool, &sha))
}

/// Reads a quantized pool and checks that it was built from the codebook
/// at `codebook_path`.
pub fn read_quantized(path: &Path, codebook_path: &Path) -> Result<QuantizedPool> {
    let (pool, sha) = decode_quantized(&read_file(path)?, path)?;
    let actual: [u8; 32] = Sha256::digest(read_file(codebook_path)?).into();
    if sha != actual {
        return Err(Error::HashMismatch {
            path: codebook_path.to_path_buf(),
            expected: hex::encode(sha),
            found: hex::encode(actual),
        });
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, Strategy};

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(rows in 0usize..6, values in prop::collection::vec(any::<f64>(), 0..36)) {
            let cols = if rows == 0 { 0 } else { values.len() / rows };
            let m = DMatrix::from_iterator(rows, cols, values.into_iter().take(rows * cols));
            let bytes = encode_matrix(&m, Dtype::F64).unwrap();
            let (back, dtype) = decode_matrix(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(dtype, Dtype::F64);
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn f32_round_trip_is_bitwise(values in prop::collection::vec(prop::num::f32::ANY.prop_filter("finite", |v| v.is_finite()), 0..30)) {
            let m = DMatrix::from_iterator(1, values.len(), values.iter().map(|&v| v as f64));
            let bytes = encode_matrix(&m, Dtype::F32).unwrap();
            let (back, _) = decode_matrix(&bytes, Path::new("mem")).unwrap();
            for (a, b) in back.iter().zip(values.iter()) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode_matrix(&back, Dtype::F32).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode_matrix(&m, Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"SLCS");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..18], &3u64.to_le_bytes());
        // column-major: second value is row 1 of column 0
        assert_eq!(&bytes[26..34], &4.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 6 * 8);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let mut bytes = encode_matrix(&m, Dtype::F32).unwrap();
        bytes.pop();
        assert!(matches!(decode_matrix(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode_matrix(&m, Dtype::F32).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode_matrix(&m, Dtype::F32).unwrap();
        bytes[5] = 7;
        assert!(matches!(decode_matrix(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.slcs");
        let m = DMatrix::from_fn(3, 4, |r, c| (r * 10 + c) as f64 / 7.0);
        write_matrix(&p, &m, Dtype::F64).unwrap();
        assert_eq!(read_matrix(&p).unwrap().0, m);
        assert_eq!(read_matrix_header(&p).unwrap(), (3, 4, Dtype::F64));
        assert!(matches!(read_matrix(&dir.path().join("none.slcs")), Err(Error::Io { .. })));
    }

    #[test]
    fn quantized_pool_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cb = dir.path().join("cb.slcs");
        write_matrix(&cb, &DMatrix::identity(2, 3), Dtype::F64).unwrap();
        let pool = QuantizedPool::new(2, vec![0, 2, 1, 1, 65535, 0]).unwrap();
        let p = dir.path().join("pool.slcq");
        write_quantized(&p, &pool, &cb).unwrap();
        assert_eq!(read_quantized(&p, &cb).unwrap(), pool);
        write_matrix(&cb, &DMatrix::identity(2, 4), Dtype::F64).unwrap();
        assert!(matches!(read_quantized(&p, &cb), Err(Error::HashMismatch { .. })));
    }
}
