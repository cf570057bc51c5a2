//! Angular distances between layers and contiguous complete-linkage grouping.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation_store::{write_atomic, ActivationDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(1/pi) * arccos(cos(p, q))`, with the cosine clamped to `[-1, 1]`.
pub fn angular_distance<T: Scalar>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "angular distance between vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let (mut pq, mut pp, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a.as_f64(), b.as_f64());
        pq += a * b;
        pp += a * a;
        qq += b * b;
    }
    if pp == 0.0 || qq == 0.0 {
        return Err(Error::Numeric("angular distance of a zero vector".into()));
    }
    let cos = (pq / (pp.sqrt() * qq.sqrt())).clamp(-1.0, 1.0);
    Ok(cos.acos() / std::f64::consts::PI)
}

/// Symmetric matrix of mean angular distances between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    entries: Vec<f64>,
    n_tokens: usize,
}

impl DistanceMatrix {
    /// Validates shape, zero diagonal, symmetry (1e-9) and range `[0, 1]`.
    pub fn new(size: usize, entries: Vec<f64>, n_tokens: usize) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Shape(format!(
                "distance matrix of size {size} needs {} entries, got {}",
                size * size,
                entries.len()
            )));
        }
        for i in 0..size {
            if entries[i * size + i] != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal at {i}")));
            }
            for j in 0..size {
                let v = entries[i * size + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                if (v - entries[j * size + i]).abs() > 1e-9 {
                    return Err(Error::Data(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            size,
            entries,
            n_tokens,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// One line per row, 17 significant digits, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size {
            let line = (0..self.size)
                .map(|j| format!("{:.16e}", self.get(i, j)))
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn from_csv(text: &str, n_tokens: usize) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Data(format!("bad distance entry {c:?}: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("distance CSV is not square".into()));
        }
        Self::new(size, rows.concat(), n_tokens)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_csv(&text, 0)
    }
}

/// Mean over the first `n_tokens` aligned rows of the angular distance
/// between every pair of `layers`. Row `t` of every layer must come from the
/// same token position.
pub fn mean_distance_matrix(
    dataset: &ActivationDataset,
    layers: &[usize],
    n_tokens: usize,
) -> Result<DistanceMatrix> {
    if layers.is_empty() || n_tokens == 0 {
        return Err(Error::Config("need at least one layer and one token".into()));
    }
    let mats = layers
        .iter()
        .map(|&l| dataset.layer(l))
        .collect::<Result<Vec<_>>>()?;
    let rows = mats[0].rows();
    if let Some((i, m)) = mats.iter().enumerate().find(|(_, m)| m.rows() != rows) {
        return Err(Error::Data(format!(
            "misaligned shards: layer {} has {} rows, layer {} has {rows}",
            layers[i],
            m.rows(),
            layers[0]
        )));
    }
    if rows < n_tokens {
        return Err(Error::Data(format!(
            "requested {n_tokens} tokens but layers hold {rows} rows"
        )));
    }
    let size = layers.len();
    let mut entries = vec![0.0; size * size];
    for p in 0..size {
        for q in p + 1..size {
            let mut sum = 0.0;
            for t in 0..n_tokens {
                sum += angular_distance(mats[p].row(t), mats[q].row(t))?;
            }
            let mean = sum / n_tokens as f64;
            entries[p * size + q] = mean;
            entries[q * size + p] = mean;
        }
    }
    DistanceMatrix::new(size, entries, n_tokens)
}

/// Contiguous, disjoint, covering groups of layer positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub k: usize,
    pub groups: Vec<Vec<usize>>,
}

impl LayerPartition {
    fn from_ranges(ranges: &[Range<usize>]) -> Self {
        Self {
            k: ranges.len(),
            groups: ranges.iter().map(|r| r.clone().collect()).collect(),
        }
    }

    /// Checks the partition invariants against `n_layers` positions.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.groups.len() != self.k {
            return Err(Error::Data(format!(
                "partition declares k={} but has {} groups",
                self.k,
                self.groups.len()
            )));
        }
        let mut next = 0;
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::Data("empty group".into()));
            }
            for &l in g {
                if l != next {
                    return Err(Error::Data(format!(
                        "groups are not contiguous and sorted: expected layer {next}, found {l}"
                    )));
                }
                next += 1;
            }
        }
        if next != n_layers {
            return Err(Error::Data(format!(
                "partition covers {next} layers, expected {n_layers}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad partition JSON: {e}")))
    }
}

/// One merge of two adjacent groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub left: Range<usize>,
    pub right: Range<usize>,
    pub linkage: f64,
    /// Linkage of every adjacent pair at the moment of this merge, left to right.
    pub candidates: Vec<f64>,
}

/// Full agglomeration record from singletons down to one group.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTrace {
    pub n_layers: usize,
    pub merges: Vec<Merge>,
    /// `partitions[i]` has `n_layers - i` groups.
    partitions: Vec<Vec<Range<usize>>>,
}

impl MergeTrace {
    pub fn partition(&self, k: usize) -> Result<LayerPartition> {
        if k == 0 || k > self.n_layers {
            return Err(Error::Config(format!(
                "k = {k} outside 1..={}",
                self.n_layers
            )));
        }
        Ok(LayerPartition::from_ranges(&self.partitions[self.n_layers - k]))
    }
}

/// Bottom-up complete linkage restricted to adjacent groups. Group distances
/// are kept in a full matrix and updated with `D(A+B, C) = max(D(A,C), D(B,C))`.
/// Ties go to the pair with the lowest starting layer.
pub fn merge_trace(d: &DistanceMatrix) -> MergeTrace {
    let n = d.size();
    let mut groups: Vec<Range<usize>> = (0..n).map(|i| i..i + 1).collect();
    let mut gd: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| d.get(i, j)).collect()).collect();
    let mut partitions = vec![groups.clone()];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while groups.len() > 1 {
        let candidates: Vec<f64> = (0..groups.len() - 1).map(|i| gd[i][i + 1]).collect();
        let mut best = 0;
        for (i, &c) in candidates.iter().enumerate().skip(1) {
            if c < candidates[best] {
                best = i;
            }
        }
        let linkage = candidates[best];
        let right = groups.remove(best + 1);
        let left = groups[best].clone();
        groups[best] = left.start..right.end;
        for row in gd.iter_mut() {
            let merged = row[best].max(row[best + 1]);
            row[best] = merged;
            row.remove(best + 1);
        }
        let merged_row = gd.remove(best + 1);
        for (j, v) in merged_row.into_iter().enumerate() {
            gd[best][j] = gd[best][j].max(v);
        }
        gd[best][best] = 0.0;
        merges.push(Merge {
            left,
            right,
            linkage,
            candidates,
        });
        partitions.push(groups.clone());
    }
    MergeTrace {
        n_layers: n,
        merges,
        partitions,
    }
}

pub fn agglomerate(d: &DistanceMatrix, k: usize) -> Result<LayerPartition> {
    if k == 0 || k > d.size() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", d.size())));
    }
    merge_trace(d).partition(k)
}

/// Partitions for `k = 1..=k_max`, all read off a single merge trace.
pub fn partition_table(d: &DistanceMatrix, k_max: usize) -> Result<Vec<LayerPartition>> {
    if k_max == 0 || k_max > d.size() {
        return Err(Error::Config(format!("k_max = {k_max} outside 1..={}", d.size())));
    }
    let trace = merge_trace(d);
    (1..=k_max).map(|k| trace.partition(k)).collect()
}
