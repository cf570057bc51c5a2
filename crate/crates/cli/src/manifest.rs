//! Run-directory bookkeeping: the experiment manifest and per-command run
//! summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sae_groups::activation_store::write_atomic;

pub const MANIFEST_FILE: &str = "experiment.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeEntry {
    pub sae_id: String,
    pub path: String,
    pub layers: Vec<usize>,
    /// `None` for per-layer baselines.
    pub k: Option<usize>,
    pub group: Option<usize>,
    pub steps: u64,
}

/// Everything a run directory holds, with paths relative to the directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub seed: u64,
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub desk_model: String,
    pub corpus: String,
    pub dataset: Option<String>,
    pub heldout: Option<String>,
    pub capture_layers: Vec<usize>,
    pub distances: Option<String>,
    pub partitions: BTreeMap<usize, String>,
    pub saes: Vec<SaeEntry>,
}

impl ExperimentManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("{} not found; run `prepare` first", path.display()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| sae_groups::Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        m.validate(dir)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Every referenced file exists and SAE ids are unique.
    pub fn validate(&self, dir: &Path) -> anyhow::Result<()> {
        let files = [Some(&self.desk_model), Some(&self.corpus), self.dataset.as_ref(), self.heldout.as_ref(), self.distances.as_ref()];
        let listed = files
            .into_iter()
            .flatten()
            .chain(self.partitions.values())
            .chain(self.saes.iter().map(|s| &s.path));
        for f in listed {
            if !dir.join(f).exists() {
                bail!("manifest references missing file {f}");
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.saes {
            if !seen.insert(&s.sae_id) {
                bail!("duplicate sae_id {}", s.sae_id);
            }
        }
        Ok(())
    }

    /// Adds `entry`, replacing any SAE with the same id.
    pub fn register_sae(&mut self, entry: SaeEntry) {
        self.saes.retain(|s| s.sae_id != entry.sae_id);
        self.saes.push(entry);
        self.saes.sort_by(|a, b| a.sae_id.cmp(&b.sae_id));
    }

    pub fn sae(&self, id: &str) -> Option<&SaeEntry> {
        self.saes.iter().find(|s| s.sae_id == id)
    }

    /// The named SAEs, or all of them when `ids` is empty.
    pub fn select_saes(&self, ids: &[String]) -> anyhow::Result<Vec<SaeEntry>> {
        if ids.is_empty() {
            return Ok(self.saes.clone());
        }
        ids.iter()
            .map(|id| self.sae(id).cloned().with_context(|| format!("no SAE named {id}")))
            .collect()
    }
}

/// What a command did: step counts per SAE (the speedup bookkeeping),
/// outputs written and the config it ran under. Wall time is omitted in
/// deterministic mode so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub config_hash: String,
    pub wall_time_s: Option<f64>,
    pub step_counts: BTreeMap<String, u64>,
    pub total_steps: u64,
    pub outputs: Vec<String>,
}

impl RunSummary {
    pub fn new(command: impl Into<String>, config_hash: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.to_string(),
            wall_time_s: None,
            step_counts: BTreeMap::new(),
            total_steps: 0,
            outputs: Vec::new(),
        }
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<D> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| sae_groups::Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> SaeEntry {
        SaeEntry {
            sae_id: id.into(),
            path: format!("{id}.saep"),
            layers: vec![0],
            k: None,
            group: None,
            steps: 1,
        }
    }

    #[test]
    fn missing_files_and_duplicates_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["m", "c", "a.saep"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let mut m = ExperimentManifest {
            desk_model: "m".into(),
            corpus: "c".into(),
            ..Default::default()
        };
        m.register_sae(entry("a"));
        m.validate(dir.path()).unwrap();
        m.register_sae(entry("a"));
        assert_eq!(m.saes.len(), 1);
        m.saes.push(entry("a"));
        assert!(m.validate(dir.path()).is_err());
        m.saes.pop();
        m.register_sae(entry("b"));
        assert!(m.validate(dir.path()).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["m", "c"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let mut m = ExperimentManifest {
            desk_model: "m".into(),
            corpus: "c".into(),
            ..Default::default()
        };
        m.partitions.insert(2, "c".into());
        m.save(dir.path()).unwrap();
        assert_eq!(ExperimentManifest::load(dir.path()).unwrap(), m);
    }
}
