//! SAE checkpoint files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SAEP"
//!      4     4  version (u32) = 1
//!      8     4  d (u32)
//!     12     4  d_sae (u32)
//!     16     4  expansion c (u32)
//!     20     4  activation code (u32)
//!     24     8  seed (u64)
//!     32     8  step (u64)
//!     40     *  W_e (d_sae x d), b_e (d_sae), W_d (d x d_sae), b_d (d), theta (d_sae)
//! ```
//!
//! Every matrix is row-major and every value is an f32 little-endian.

use std::fs;
use std::path::Path;

use super::{Activation, SaeParams};
use crate::activation_store::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const SAE_MAGIC: [u8; 4] = *b"SAEP";
pub const SAE_VERSION: u32 = 1;
pub const SAE_HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaeCheckpointHeader {
    pub d: u32,
    pub d_sae: u32,
    pub expansion: u32,
    pub activation: Activation,
    pub seed: u64,
    pub step: u64,
}

impl SaeCheckpointHeader {
    fn payload_values(&self) -> usize {
        let (d, m) = (self.d as usize, self.d_sae as usize);
        2 * d * m + 2 * m + d
    }
}

pub fn write_sae<T: Scalar>(sae: &SaeParams<T>, seed: u64, step: u64, path: &Path) -> Result<()> {
    let header = SaeCheckpointHeader {
        d: sae.d() as u32,
        d_sae: sae.d_sae() as u32,
        expansion: sae.expansion() as u32,
        activation: sae.activation(),
        seed,
        step,
    };
    let mut bytes = Vec::with_capacity(SAE_HEADER_LEN + 4 * header.payload_values());
    bytes.extend_from_slice(&SAE_MAGIC);
    bytes.extend_from_slice(&SAE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&header.d.to_le_bytes());
    bytes.extend_from_slice(&header.d_sae.to_le_bytes());
    bytes.extend_from_slice(&header.expansion.to_le_bytes());
    bytes.extend_from_slice(&header.activation.code().to_le_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&step.to_le_bytes());
    let w_dec = sae.w_dec();
    let blocks: [&[T]; 5] = [
        sae.w_enc().as_slice(),
        sae.b_enc(),
        w_dec.as_slice(),
        sae.b_dec(),
        sae.theta(),
    ];
    for block in blocks {
        for &v in block {
            bytes.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_sae<T: Scalar>(path: &Path) -> Result<(SaeCheckpointHeader, SaeParams<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() < SAE_HEADER_LEN {
        return Err(Error::format(path, "file shorter than SAE header"));
    }
    if bytes[0..4] != SAE_MAGIC {
        return Err(Error::format(path, "bad SAE magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != SAE_VERSION {
        return Err(Error::format(path, format!("unsupported SAE version {}", u32_at(4))));
    }
    let code = u32_at(20);
    let activation = Activation::from_code(code)
        .ok_or_else(|| Error::format(path, format!("unknown activation code {code}")))?;
    let header = SaeCheckpointHeader {
        d: u32_at(8),
        d_sae: u32_at(12),
        expansion: u32_at(16),
        activation,
        seed: u64_at(24),
        step: u64_at(32),
    };
    if header.d == 0 || header.d_sae != header.d * header.expansion {
        return Err(Error::format(path, "inconsistent SAE dimensions in header"));
    }
    let payload = &bytes[SAE_HEADER_LEN..];
    let want = 4 * header.payload_values();
    if payload.len() != want {
        return Err(Error::corruption(
            path,
            format!("expected {want} payload bytes, found {}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| T::from_f32_bits(u32::from_le_bytes(c.try_into().unwrap())));
    let (d, m) = (header.d as usize, header.d_sae as usize);
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<T>>();
    let w_enc = Matrix::from_vec(m, d, take(m * d));
    let b_enc = take(m);
    let w_dec = Matrix::from_vec(d, m, take(d * m));
    let b_dec = take(d);
    let theta = take(m);
    let sae = SaeParams::from_parts(w_enc, b_enc, &w_dec, b_dec, theta, activation)
        .map_err(|e| Error::corruption(path, e.to_string()))?;
    Ok((header, sae))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_sae() -> SaeParams<f32> {
        let mut rng = RngStream::new(5);
        let mean = vec![0.5, -1.0, 2.0];
        let mut sae =
            SaeParams::<f32>::init(3, 2, &mean, 1.0, 0.01, Activation::ProductJumpRelu, &mut rng).unwrap();
        let dec = rng.normal_vec::<f32>(18, 1.0);
        sae.dec.as_mut_slice().copy_from_slice(&dec);
        sae
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        let sae = random_sae();
        write_sae(&sae, 9, 123, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, SAE_HEADER_LEN + 4 * (2 * 3 * 6 + 2 * 6 + 3));
        let (h, back) = read_sae::<f32>(&path).unwrap();
        assert_eq!(back, sae);
        assert_eq!((h.d, h.d_sae, h.expansion, h.seed, h.step), (3, 6, 2, 9, 123));
        assert_eq!(h.activation, Activation::ProductJumpRelu);
    }

    #[test]
    fn decoder_is_written_d_by_d_sae() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        let sae = random_sae();
        write_sae(&sae, 0, 0, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let off = SAE_HEADER_LEN + 4 * (18 + 6);
        let at = |i: usize| f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap());
        // W_d[r][c] sits at r * d_sae + c and equals decoder column c, entry r.
        for r in 0..3 {
            for c in 0..6 {
                assert_eq!(at(r * 6 + c), sae.decoder_column(c)[r]);
            }
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        write_sae(&random_sae(), 0, 0, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_sae::<f32>(&path), Err(Error::Corruption { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_sae::<f32>(&path), Err(Error::Format { .. })));
    }
}
