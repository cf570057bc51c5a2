//! Model checkpoints and corpus files.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DESK"
//!      4     4  version (u32) = 1
//!      8    20  n_layers, d_model, n_heads, vocab, context (u32 each)
//!     28     4  RNG algorithm id (u32), 0 = chacha8
//!     32     8  seed (u64)
//!     40     8  parameter count (u64)
//!     48     *  parameter blocks in `DeskParams::blocks` order, f32
//! ```
//!
//! A corpus file is the concatenated u32 token ids of equal-length sequences.

use std::fs;
use std::path::Path;

use super::corpus::Corpus;
use super::{DeskConfig, DeskParams};
use crate::activation_store::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::RNG_ALGORITHM;
use crate::scalar::Scalar;

pub const DESK_MAGIC: [u8; 4] = *b"DESK";
pub const DESK_VERSION: u32 = 1;
pub const DESK_HEADER_LEN: usize = 48;
const RNG_ID_CHACHA8: u32 = 0;

pub fn write_desk_model<T: Scalar>(params: &DeskParams<T>, path: &Path) -> Result<()> {
    debug_assert_eq!(RNG_ALGORITHM, "chacha8");
    let c = &params.config;
    let n = params.n_params();
    let mut bytes = Vec::with_capacity(DESK_HEADER_LEN + 4 * n);
    bytes.extend_from_slice(&DESK_MAGIC);
    bytes.extend_from_slice(&DESK_VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.n_heads, c.vocab, c.context] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&RNG_ID_CHACHA8.to_le_bytes());
    bytes.extend_from_slice(&c.seed.to_le_bytes());
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for (_, b) in params.blocks() {
        for &v in b {
            bytes.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_desk_model<T: Scalar>(path: &Path) -> Result<DeskParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() < DESK_HEADER_LEN {
        return Err(Error::format(path, "file shorter than model header"));
    }
    if bytes[0..4] != DESK_MAGIC {
        return Err(Error::format(path, "bad model magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != DESK_VERSION {
        return Err(Error::format(path, format!("unsupported model version {}", u32_at(4))));
    }
    if u32_at(28) != RNG_ID_CHACHA8 {
        return Err(Error::format(path, format!("unknown RNG algorithm id {}", u32_at(28))));
    }
    let config = DeskConfig {
        n_layers: u32_at(8) as usize,
        d_model: u32_at(12) as usize,
        n_heads: u32_at(16) as usize,
        vocab: u32_at(20) as usize,
        context: u32_at(24) as usize,
        seed: u64_at(32),
    };
    config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = DeskParams::<T>::zeros(&config);
    let n = params.n_params();
    if u64_at(40) != n as u64 || bytes.len() != DESK_HEADER_LEN + 4 * n {
        return Err(Error::corruption(
            path,
            format!(
                "expected {n} parameters ({} bytes), found {} bytes",
                DESK_HEADER_LEN + 4 * n,
                bytes.len()
            ),
        ));
    }
    let mut values = bytes[DESK_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::from_f32_bits(u32::from_le_bytes(c.try_into().unwrap())));
    for (_, b) in params.blocks_mut() {
        for (dst, v) in b.iter_mut().zip(values.by_ref()) {
            *dst = v;
        }
    }
    if !params.is_finite() {
        return Err(Error::corruption(path, "non-finite parameter"));
    }
    Ok(params)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if corpus.sequences.iter().any(|s| s.len() != corpus.context) {
        return Err(Error::Data(
            "corpus files require every sequence to fill the context".into(),
        ));
    }
    let mut bytes = Vec::with_capacity(4 * corpus.n_tokens());
    for t in corpus.sequences.iter().flatten() {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_corpus(path: &Path, context: usize) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    if bytes.len() % 4 != 0 || context == 0 || (bytes.len() / 4) % context != 0 {
        return Err(Error::corruption(
            path,
            format!("{} bytes is not a whole number of {context}-token sequences", bytes.len()),
        ));
    }
    let tokens: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let sequences = tokens.chunks(context).map(<[u32]>::to_vec).collect();
    Corpus::new(context, sequences)
}
