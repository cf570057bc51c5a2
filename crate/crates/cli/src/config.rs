//! Experiment configuration: a flat-or-sectioned TOML file of `key = value`
//! pairs, then `section.key=value` overrides from the command line.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sae_groups::desk_model::{DeskConfig, DeskTrainConfig, TemplateKind};
use sae_groups::downstream::IeMethod;
use sae_groups::numerics::AdamConfig;
use sae_groups::sae::SaeTrainConfig;
use sae_groups::{Activation, Error, ExecMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub desk: DeskSection,
    pub corpus: CorpusSection,
    pub capture: CaptureSection,
    pub distances: DistanceSection,
    pub sae: SaeSection,
    pub eval: EvalSection,
    pub downstream: DownstreamSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_sequences: usize,
    pub heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSection {
    pub n_tokens: usize,
    pub heldout_tokens: usize,
    /// Also capture the final layer, which grouping normally leaves out.
    pub include_last: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceSection {
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub expansion: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_tokens: u64,
    pub lr_decay_fraction: f64,
    pub l1_warmup_fraction: f64,
    pub checkpoint_every_tokens: u64,
    pub activation: String,
    pub theta_init: f64,
    pub theta_bandwidth: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_examples: usize,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSection {
    pub tasks: Vec<String>,
    pub n_instances: usize,
    pub ig_steps: usize,
}


impl Default for DeskSection {
    fn default() -> Self {
        let m = DeskConfig::default();
        let t = DeskTrainConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            vocab: m.vocab,
            context: m.context,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_sequences: 4096,
            heldout: 128,
        }
    }
}

impl Default for CaptureSection {
    fn default() -> Self {
        Self {
            n_tokens: 131_072,
            heldout_tokens: 8192,
            include_last: false,
        }
    }
}

impl Default for DistanceSection {
    fn default() -> Self {
        Self { n_tokens: 16_384 }
    }
}

// Desk-scale SAE settings; the library defaults are sized for a billion tokens.
impl Default for SaeSection {
    fn default() -> Self {
        let s = SaeTrainConfig::default();
        Self {
            expansion: s.expansion,
            lambda: s.lambda,
            lr: 1e-3,
            batch_size: 1024,
            total_tokens: 2_048_000,
            lr_decay_fraction: s.lr_decay_fraction,
            l1_warmup_fraction: s.l1_warmup_fraction,
            checkpoint_every_tokens: 0,
            activation: s.activation.name().to_string(),
            theta_init: s.theta_init,
            theta_bandwidth: s.theta_bandwidth,
            adam_beta1: s.adam.beta1,
            adam_beta2: s.adam.beta2,
            adam_eps: s.adam.eps,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_examples: 4096,
            n_sequences: 32,
        }
    }
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            tasks: TemplateKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            n_instances: 20,
            ig_steps: 10,
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then `file` if given, then each `key=value` override. Every
    /// failure is reported as a configuration error.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        Self::resolve_table(file, overrides).map_err(|e| Error::Config(format!("{e:#}")).into())
    }

    fn resolve_table(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.desk_config().validate()?;
        self.sae_config(ExecMode::Deterministic, 0)?.validate()?;
        if self.corpus.heldout == 0 || self.corpus.heldout >= self.corpus.n_sequences {
            bail!("corpus.heldout must be in 1..corpus.n_sequences");
        }
        for t in &self.downstream.tasks {
            if TemplateKind::parse(t).is_none() {
                bail!("unknown downstream task {t}");
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn desk_config(&self) -> DeskConfig {
        DeskConfig {
            n_layers: self.desk.n_layers,
            d_model: self.desk.d_model,
            n_heads: self.desk.n_heads,
            vocab: self.desk.vocab,
            context: self.desk.context,
            seed: self.seed,
        }
    }

    pub fn desk_train_config(&self, exec_mode: ExecMode) -> DeskTrainConfig {
        DeskTrainConfig {
            steps: self.desk.steps,
            batch_size: self.desk.batch_size,
            lr: self.desk.lr,
            warmup_steps: self.desk.warmup_steps,
            seed: self.seed,
            exec_mode,
            ..DeskTrainConfig::default()
        }
    }

    pub fn sae_config(&self, exec_mode: ExecMode, seed: u64) -> anyhow::Result<SaeTrainConfig> {
        let activation = Activation::parse(&self.sae.activation)
            .with_context(|| format!("unknown activation {}", self.sae.activation))?;
        Ok(SaeTrainConfig {
            expansion: self.sae.expansion,
            lambda: self.sae.lambda,
            lr: self.sae.lr,
            batch_size: self.sae.batch_size,
            adam: AdamConfig {
                beta1: self.sae.adam_beta1,
                beta2: self.sae.adam_beta2,
                eps: self.sae.adam_eps,
            },
            total_tokens: self.sae.total_tokens,
            lr_decay_fraction: self.sae.lr_decay_fraction,
            l1_warmup_fraction: self.sae.l1_warmup_fraction,
            checkpoint_every_tokens: self.sae.checkpoint_every_tokens,
            seed,
            activation,
            theta_init: self.sae.theta_init,
            theta_bandwidth: self.sae.theta_bandwidth,
            exec_mode,
            ..SaeTrainConfig::default()
        })
    }

    pub fn tasks(&self) -> Vec<TemplateKind> {
        self.downstream
            .tasks
            .iter()
            .filter_map(|t| TemplateKind::parse(t))
            .collect()
    }

    pub fn ie_method(&self, name: &str) -> anyhow::Result<IeMethod> {
        match IeMethod::parse(name) {
            Some(IeMethod::Ig { averaged, .. }) => Ok(IeMethod::Ig {
                steps: self.downstream.ig_steps,
                averaged,
            }),
            Some(m) => Ok(m),
            None => Err(Error::Config(format!("unknown method {name}; expected exact, atp, ig or ig-sum")).into()),
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = ExperimentConfig::resolve(None, &[]).unwrap();
        assert_eq!(base, ExperimentConfig::default());
        let o = ExperimentConfig::resolve(None, &["sae.lr=5e-4".into(), "seed=3".into()]).unwrap();
        assert_eq!(o.sae.lr, 5e-4);
        assert_eq!(o.seed, 3);
        assert_ne!(o.hash(), base.hash());
        assert_eq!(base.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn string_overrides_need_no_quotes() {
        let c = ExperimentConfig::resolve(None, &["sae.activation=product-jumprelu".into()]).unwrap();
        assert_eq!(c.sae.activation, "product-jumprelu");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::resolve(None, &["sae.lrr=1".into()]).is_err());
        assert!(ExperimentConfig::resolve(None, &["desk.n_heads=5".into()]).is_err());
        assert!(ExperimentConfig::resolve(None, &["nokey".into()]).is_err());
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let mut c = ExperimentConfig::default();
        c.capture.include_last = true;
        std::fs::write(&path, c.to_toml()).unwrap();
        assert_eq!(ExperimentConfig::resolve(Some(&path), &[]).unwrap(), c);
    }
}
