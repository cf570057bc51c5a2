//! Binary activation shards, dataset manifests and the group batch sampler.
//!
//! Shard layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SAEA"
//!      4     4  version (u32) = 1
//!      8     4  layer index (u32)
//!     12     4  d_model (u32)
//!     16     8  n_rows (u64)
//!     24     4  dtype code (u32), 0 = f32 little-endian
//!     28     *  n_rows * d_model f32 values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::scalar::Scalar;

pub const SHARD_MAGIC: [u8; 4] = *b"SAEA";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: usize = 28;
pub const DTYPE_F32_LE: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub layer_index: u32,
    pub d_model: u32,
    pub n_rows: u64,
    pub dtype_code: u32,
}

impl ShardHeader {
    fn encode(&self) -> [u8; SHARD_HEADER_LEN] {
        let mut buf = [0u8; SHARD_HEADER_LEN];
        buf[0..4].copy_from_slice(&SHARD_MAGIC);
        buf[4..8].copy_from_slice(&SHARD_VERSION.to_le_bytes());
        buf[8..12].copy_from_slice(&self.layer_index.to_le_bytes());
        buf[12..16].copy_from_slice(&self.d_model.to_le_bytes());
        buf[16..24].copy_from_slice(&self.n_rows.to_le_bytes());
        buf[24..28].copy_from_slice(&self.dtype_code.to_le_bytes());
        buf
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < SHARD_HEADER_LEN {
            return Err(Error::format(path, "file shorter than shard header"));
        }
        if bytes[0..4] != SHARD_MAGIC {
            return Err(Error::format(path, "bad shard magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != SHARD_VERSION {
            return Err(Error::format(path, format!("unsupported shard version {version}")));
        }
        let header = Self {
            layer_index: u32_at(8),
            d_model: u32_at(12),
            n_rows: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            dtype_code: u32_at(24),
        };
        if header.dtype_code != DTYPE_F32_LE {
            return Err(Error::format(
                path,
                format!("unsupported dtype code {}", header.dtype_code),
            ));
        }
        Ok(header)
    }

    pub fn payload_len(&self) -> u64 {
        self.n_rows * self.d_model as u64 * 4
    }
}

/// Writes bytes to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::storage(&tmp, e))?;
    file.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

/// Serializes `rows` as a shard and returns the number of rows written.
pub fn write_shard<T: Scalar>(layer_index: usize, rows: &Matrix<T>, path: &Path) -> Result<u64> {
    if rows.cols() == 0 {
        return Err(Error::Config("d_model must be positive".into()));
    }
    for r in 0..rows.rows() {
        if rows.row(r).iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {r} contains a non-finite value")));
        }
    }
    let header = ShardHeader {
        layer_index: layer_index as u32,
        d_model: rows.cols() as u32,
        n_rows: rows.rows() as u64,
        dtype_code: DTYPE_F32_LE,
    };
    let mut bytes = Vec::with_capacity(SHARD_HEADER_LEN + header.payload_len() as usize);
    bytes.extend_from_slice(&header.encode());
    for &v in rows.as_slice() {
        bytes.extend_from_slice(&v.to_f32_bits().to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    Ok(header.n_rows)
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Matrix<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let header = ShardHeader::decode(&bytes, path)?;
    let payload = &bytes[SHARD_HEADER_LEN..];
    if payload.len() as u64 != header.payload_len() {
        return Err(Error::corruption(
            path,
            format!(
                "expected {} payload bytes for {} rows, found {}",
                header.payload_len(),
                header.n_rows,
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix::new(header.n_rows as usize, header.d_model as usize, data)
        .map_err(|e| Error::corruption(path, e.to_string()))?;
    Ok((header, m))
}

/// One layer's entry in a dataset manifest. Shard paths are relative to the
/// manifest file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShards {
    pub layer: usize,
    pub rows: u64,
    pub shards: Vec<String>,
}

/// JSON manifest listing shard files per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d_model: usize,
    pub dtype: String,
    pub layers: Vec<LayerShards>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }
}

/// Per-layer activation rows held in memory.
#[derive(Debug, Clone, Default)]
pub struct ActivationDataset {
    d_model: usize,
    layers: BTreeMap<usize, Matrix<f32>>,
}

impl ActivationDataset {
    pub fn from_layers(layers: BTreeMap<usize, Matrix<f32>>) -> Result<Self> {
        let d_model = layers.values().next().map_or(0, Matrix::cols);
        for (&l, m) in &layers {
            if m.cols() != d_model {
                return Err(Error::Data(format!(
                    "layer {l} has width {}, expected {d_model}",
                    m.cols()
                )));
            }
            if m.rows() == 0 {
                return Err(Error::Data(format!("layer {l} has no rows")));
            }
        }
        Ok(Self { d_model, layers })
    }

    /// Loads every shard referenced by a manifest, concatenating per layer.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut layers = BTreeMap::new();
        for entry in &manifest.layers {
            let mut data = Vec::new();
            let mut rows = 0usize;
            for shard in &entry.shards {
                let path = base.join(shard);
                let (header, m) = read_shard(&path)?;
                if header.d_model as usize != manifest.d_model {
                    return Err(Error::Data(format!(
                        "{} has d_model {}, manifest says {}",
                        path.display(),
                        header.d_model,
                        manifest.d_model
                    )));
                }
                if header.layer_index as usize != entry.layer {
                    return Err(Error::Data(format!(
                        "{} holds layer {}, manifest says {}",
                        path.display(),
                        header.layer_index,
                        entry.layer
                    )));
                }
                rows += m.rows();
                data.extend_from_slice(m.as_slice());
            }
            if rows as u64 != entry.rows {
                return Err(Error::Data(format!(
                    "layer {} manifest lists {} rows, shards hold {rows}",
                    entry.layer, entry.rows
                )));
            }
            layers.insert(entry.layer, Matrix::from_vec(rows, manifest.d_model, data));
        }
        Self::from_layers(layers)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn layer(&self, layer: usize) -> Result<&Matrix<f32>> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} not in dataset")))
    }

    pub fn rows(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.rows())
    }
}

/// Streaming mean of one layer's rows, accumulated in 64-bit.
pub fn layer_mean(dataset: &ActivationDataset, layer: usize) -> Result<Vec<f64>> {
    let m = dataset.layer(layer)?;
    let mut acc = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += v as f64;
        }
    }
    let n = m.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean over the pooled rows of several layers, each row weighted equally.
pub fn pooled_mean(dataset: &ActivationDataset, layers: &[usize]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; dataset.d_model()];
    let mut n = 0usize;
    for &l in layers {
        let m = dataset.layer(l)?;
        for r in 0..m.rows() {
            for (a, &v) in acc.iter_mut().zip(m.row(r)) {
                *a += v as f64;
            }
        }
        n += m.rows();
    }
    if n == 0 {
        return Err(Error::Config("pooled mean over an empty layer set".into()));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Draws rows uniformly, with replacement, over every `(layer, row)` pair of
/// a layer group.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    layers: Vec<usize>,
    batch_size: usize,
    rng: RngStream,
    batches_drawn: u64,
}

impl BatchSampler {
    pub fn new(layers: &[usize], batch_size: usize, rng: RngStream) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("batch sampler needs at least one layer".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Ok(Self {
            layers,
            batch_size,
            rng,
            batches_drawn: 0,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_drawn(&self) -> u64 {
        self.batches_drawn
    }

    pub fn sample_batch(&mut self, dataset: &ActivationDataset) -> Result<Matrix<f32>> {
        let mut out = Matrix::zeros(self.batch_size, dataset.d_model());
        self.sample_into(dataset, &mut out, None)?;
        Ok(out)
    }

    /// Fills `out` and optionally records each row's layer of origin.
    pub fn sample_into(
        &mut self,
        dataset: &ActivationDataset,
        out: &mut Matrix<f32>,
        mut origin: Option<&mut Vec<usize>>,
    ) -> Result<()> {
        if out.shape() != (self.batch_size, dataset.d_model()) {
            return Err(Error::Shape(format!(
                "batch buffer {:?}, expected {:?}",
                out.shape(),
                (self.batch_size, dataset.d_model())
            )));
        }
        let sources = self
            .layers
            .iter()
            .map(|&l| dataset.layer(l).map(|m| (l, m)))
            .collect::<Result<Vec<_>>>()?;
        let total: u64 = sources.iter().map(|(_, m)| m.rows() as u64).sum();
        if let Some(o) = origin.as_deref_mut() {
            o.clear();
        }
        for r in 0..self.batch_size {
            let mut idx = self.rng.below(total);
            let mut pick = None;
            for &(l, m) in &sources {
                let n = m.rows() as u64;
                if idx < n {
                    pick = Some((l, m, idx as usize));
                    break;
                }
                idx -= n;
            }
            let (l, m, row) = pick.expect("index within total row count");
            out.row_mut(r).copy_from_slice(m.row(row));
            if let Some(o) = origin.as_deref_mut() {
                o.push(l);
            }
        }
        self.batches_drawn += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn single_layer(rows: Vec<Vec<f32>>) -> ActivationDataset {
        let mut map = BTreeMap::new();
        map.insert(0, Matrix::from_rows(&rows).unwrap());
        ActivationDataset::from_layers(map).unwrap()
    }

    #[test]
    fn empty_shard_is_header_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        assert_eq!(write_shard(3, &Matrix::<f32>::zeros(0, 4), &path).unwrap(), 0);
        assert_eq!(fs::metadata(&path).unwrap().len(), SHARD_HEADER_LEN as u64);
        let (h, m) = read_shard(&path).unwrap();
        assert_eq!(h.layer_index, 3);
        assert_eq!(m.shape(), (0, 4));
    }

    #[test]
    fn one_row_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let m = Matrix::from_rows(&[vec![1.0f32, -2.0, 3.5, 0.0]]).unwrap();
        write_shard(0, &m, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), SHARD_HEADER_LEN as u64 + 16);
        assert_eq!(read_shard(&path).unwrap().1, m);
    }

    #[test]
    fn flipped_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_shard(0, &Matrix::<f32>::zeros(2, 3), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn short_payload_is_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_shard(0, &Matrix::<f32>::zeros(3, 2), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Corruption { .. })));
    }

    #[test]
    fn non_finite_row_is_reported() {
        let dir = tempdir().unwrap();
        let m = Matrix::from_vec(3, 1, vec![0.0f32, 1.0, f32::NAN]);
        let err = write_shard(0, &m, &dir.path().join("x.bin")).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn layer_mean_examples() {
        let ds = single_layer(vec![vec![1.0, 1.0], vec![3.0, 3.0]]);
        assert_eq!(layer_mean(&ds, 0).unwrap(), vec![2.0, 2.0]);
        let ds = single_layer(vec![vec![0.5, -4.0]]);
        assert_eq!(layer_mean(&ds, 0).unwrap(), vec![0.5, -4.0]);
        assert!(matches!(layer_mean(&ds, 9), Err(Error::Config(_))));
    }

    #[test]
    fn layer_mean_standard_normal() {
        let mut rng = RngStream::new(11);
        let n = 10_000;
        let data: Vec<f32> = rng.normal_vec(n * 3, 1.0);
        let mut map = BTreeMap::new();
        map.insert(0, Matrix::from_vec(n, 3, data));
        let ds = ActivationDataset::from_layers(map).unwrap();
        let bound = 5.0 / (n as f64).sqrt();
        assert!(layer_mean(&ds, 0).unwrap().iter().all(|m| m.abs() < bound));
    }

    #[test]
    fn batch_of_one_is_a_stored_row() {
        let ds = single_layer(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mut s = BatchSampler::new(&[0], 1, RngStream::new(5)).unwrap();
        let b = s.sample_batch(&ds).unwrap();
        let stored = ds.layer(0).unwrap();
        assert!((0..3).any(|r| stored.row(r) == b.row(0)));
    }

    #[test]
    fn sampling_is_seeded() {
        let rows: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32]).collect();
        let ds = single_layer(rows);
        let draw = |seed| {
            let mut s = BatchSampler::new(&[0], 50, RngStream::new(seed)).unwrap();
            s.sample_batch(&ds).unwrap()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn empty_group_rejected() {
        assert!(matches!(
            BatchSampler::new(&[], 4, RngStream::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn two_layer_share_within_binomial_bound() {
        let n = 100;
        let mut map = BTreeMap::new();
        map.insert(0, Matrix::<f32>::zeros(n, 2));
        map.insert(1, Matrix::<f32>::from_vec(n, 2, vec![1.0; 2 * n]));
        let ds = ActivationDataset::from_layers(map).unwrap();
        let mut s = BatchSampler::new(&[0, 1], 1000, RngStream::new(3)).unwrap();
        let mut origin = Vec::new();
        let mut buf = Matrix::zeros(1000, 2);
        let mut from_zero = 0usize;
        for _ in 0..100 {
            s.sample_into(&ds, &mut buf, Some(&mut origin)).unwrap();
            from_zero += origin.iter().filter(|&&l| l == 0).count();
        }
        // 1e5 Bernoulli(0.5) draws: sigma = sqrt(1e5 * 0.25) ~= 158.1
        let sigma = (1e5f64 * 0.25).sqrt();
        assert!((from_zero as f64 - 5e4).abs() < 3.0 * sigma, "{from_zero}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let a = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0f32, 6.0]]).unwrap();
        write_shard(2, &a, &dir.path().join("l2a.bin")).unwrap();
        write_shard(2, &b, &dir.path().join("l2b.bin")).unwrap();
        let manifest = DatasetManifest {
            d_model: 2,
            dtype: "f32le".into(),
            layers: vec![LayerShards {
                layer: 2,
                rows: 3,
                shards: vec!["l2a.bin".into(), "l2b.bin".into()],
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let ds = ActivationDataset::load(&mpath).unwrap();
        assert_eq!(ds.layer(2).unwrap().rows(), 3);
        assert_eq!(ds.layer(2).unwrap().row(2), &[5.0, 6.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shard_round_trip_is_bit_exact(
            rows in 0usize..6,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u32>(), 30),
        ) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| {
                    let v = f32::from_bits(bits[i % bits.len()]);
                    if v.is_finite() { v } else { i as f32 }
                })
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.bin");
            write_shard(1, &m, &path).unwrap();
            let (_, back) = read_shard(&path).unwrap();
            prop_assert!(m.as_slice().iter().zip(back.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.shape(), m.shape());
        }
    }
}
