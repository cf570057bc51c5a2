//! The pipeline commands. Each reads and extends the run directory's
//! manifest and writes a `RunSummary` under `summaries/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sae_groups::activation_store::{
    layer_mean, write_shard, ActivationDataset, DatasetManifest, LayerShards,
};
use sae_groups::clustering::{agglomerate, mean_distance_matrix, DistanceMatrix, LayerPartition};
use sae_groups::desk_model::{
    forward, gen_corpus, init_desk_model, read_corpus, read_desk_model, train_desk_model, write_corpus,
    write_desk_model, Corpus,
};
use sae_groups::downstream::{
    build_task, curve_csv, ie_csv, solvability, sweep_curve, task_ie, AblationContext, CurvePoint, IeScores,
    SelectionRule, COUNT_GRID, PERCENT_GRID,
};
use sae_groups::evaluation::{evaluate_sae, mmcs, EvalContext};
use sae_groups::sae::{read_sae, train_sae, write_sae};
use sae_groups::{DeskParams, Error, ExecMode, Matrix, SaeParams};

use crate::config::{hex, ExperimentConfig};
use crate::manifest::{read_json, write_json, write_text, ExperimentManifest, RunSummary, SaeEntry};

pub const CONFIG_FILE: &str = "config.toml";

/// A run directory plus the configuration resolved for this invocation.
#[derive(Debug, Clone)]
pub struct Session {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
    pub exec_mode: ExecMode,
}

impl Session {
    /// Uses `config_file` if given, else the run directory's saved config,
    /// else the defaults; then applies `overrides`.
    pub fn open(dir: &Path, config_file: Option<&Path>, overrides: Vec<String>, deterministic: bool) -> anyhow::Result<Self> {
        let saved = dir.join(CONFIG_FILE);
        let file = config_file.or(saved.exists().then_some(saved.as_path()));
        let config = ExperimentConfig::resolve(file, &overrides)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            overrides,
            exec_mode: if deterministic {
                ExecMode::Deterministic
            } else {
                ExecMode::Parallel
            },
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn summary(&self, command: &str) -> RunSummary {
        RunSummary::new(command, &self.config.hash())
    }

    fn finish(&self, mut summary: RunSummary, name: &str, started: Instant) -> anyhow::Result<RunSummary> {
        if self.exec_mode == ExecMode::Parallel {
            summary.wall_time_s = Some(started.elapsed().as_secs_f64());
        }
        summary.total_steps = summary.step_counts.values().sum();
        write_json(&self.path(&format!("summaries/{name}.json")), &summary)?;
        Ok(summary)
    }

    fn manifest(&self) -> anyhow::Result<ExperimentManifest> {
        ExperimentManifest::load(&self.dir)
    }

    fn model(&self, m: &ExperimentManifest) -> anyhow::Result<DeskParams<f32>> {
        Ok(read_desk_model(&self.path(&m.desk_model))?)
    }

    fn corpus_split(&self, m: &ExperimentManifest) -> anyhow::Result<(Corpus, Corpus)> {
        let corpus = read_corpus(&self.path(&m.corpus), self.config.desk.context)?;
        Ok(corpus.split(self.config.corpus.heldout)?)
    }

    fn dataset(&self, rel: Option<&String>, what: &str) -> anyhow::Result<ActivationDataset> {
        let rel = rel.with_context(|| format!("no {what} activations; run `capture` first"))?;
        Ok(ActivationDataset::load(&self.path(rel))?)
    }
}

/// Generates the corpus and trains the desk model.
pub fn prepare(s: &Session) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let c = &s.config;
    std::fs::create_dir_all(&s.dir).with_context(|| format!("creating {}", s.dir.display()))?;
    let desk = c.desk_config();
    let corpus = gen_corpus(c.seed, c.corpus.n_sequences, &desk)?;
    let (train, _) = corpus.split(c.corpus.heldout)?;
    info!("training desk model for {} steps on {} sequences", c.desk.steps, train.len());
    let (model, log) = train_desk_model(init_desk_model::<f32>(&desk)?, &train, &c.desk_train_config(s.exec_mode))?;
    write_desk_model(&model, &s.path("desk.ckpt"))?;
    write_corpus(&corpus, &s.path("corpus.bin"))?;
    write_text(&s.path(CONFIG_FILE), &c.to_toml())?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        let _ = writeln!(losses, "{i},{l:.16e}");
    }
    write_text(&s.path("logs/desk_train.csv"), &losses)?;
    let manifest = ExperimentManifest {
        seed: c.seed,
        config_hash: c.hash(),
        overrides: s.overrides.clone(),
        desk_model: "desk.ckpt".into(),
        corpus: "corpus.bin".into(),
        ..Default::default()
    };
    manifest.save(&s.dir)?;
    let mut summary = s.summary("prepare");
    summary.step_counts.insert("desk".into(), log.losses.len() as u64);
    summary.outputs = vec!["desk.ckpt".into(), "corpus.bin".into(), CONFIG_FILE.into(), "logs/desk_train.csv".into()];
    s.finish(summary, "prepare", started)
}

/// Residual-stream activations after each block, one row per token position.
pub fn capture_rows(
    model: &DeskParams<f32>,
    sequences: &[Vec<u32>],
    layers: &[usize],
    n_tokens: usize,
) -> anyhow::Result<BTreeMap<usize, Matrix<f32>>> {
    let d = model.config.d_model;
    let mut data: BTreeMap<usize, Vec<f32>> = layers.iter().map(|&l| (l, Vec::with_capacity(n_tokens * d))).collect();
    let mut rows = 0;
    for chunk in sequences.chunks(64) {
        if rows >= n_tokens {
            break;
        }
        let hooks = chunk
            .par_iter()
            .map(|seq| forward(model, seq).map(|(_, h)| h))
            .collect::<sae_groups::Result<Vec<_>>>()?;
        for h in hooks {
            let take = h.layer(0).rows().min(n_tokens - rows);
            for &l in layers {
                data.get_mut(&l).expect("layer listed").extend_from_slice(&h.layer(l).as_slice()[..take * d]);
            }
            rows += take;
        }
    }
    if rows < n_tokens {
        bail!("corpus yields {rows} positions, {n_tokens} requested");
    }
    Ok(data.into_iter().map(|(l, v)| (l, Matrix::from_vec(n_tokens, d, v))).collect())
}

fn write_dataset(dir: &Path, rows: &BTreeMap<usize, Matrix<f32>>) -> anyhow::Result<Vec<String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = DatasetManifest {
        d_model: rows.values().next().map_or(0, Matrix::cols),
        dtype: "f32-le".into(),
        layers: Vec::new(),
    };
    let mut written = Vec::new();
    for (&l, m) in rows {
        let name = format!("layer{l}.bin");
        let n = write_shard(l, m, &dir.join(&name))?;
        manifest.layers.push(LayerShards {
            layer: l,
            rows: n,
            shards: vec![name.clone()],
        });
        written.push(name);
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(written)
}

/// Captures training and held-out activations for every layer except the
/// last (or every layer with `include_last`).
pub fn capture(s: &Session, include_last: bool) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let c = &s.config;
    let mut m = s.manifest()?;
    let model = s.model(&m)?;
    let (train, held) = s.corpus_split(&m)?;
    let n_layers = model.config.n_layers;
    let layers: Vec<usize> = (0..if include_last || c.capture.include_last { n_layers } else { n_layers - 1 }).collect();
    if layers.is_empty() {
        bail!(Error::Config("a one-layer model has no layers to group".into()));
    }
    let mut summary = s.summary("capture");
    for (name, corpus, n) in [("train", &train, c.capture.n_tokens), ("heldout", &held, c.capture.heldout_tokens)] {
        info!("capturing {n} {name} positions for layers {layers:?}");
        let rows = capture_rows(&model, &corpus.sequences, &layers, n)?;
        for f in write_dataset(&s.path(&format!("activations/{name}")), &rows)? {
            summary.outputs.push(format!("activations/{name}/{f}"));
        }
        summary.outputs.push(format!("activations/{name}/manifest.json"));
    }
    m.dataset = Some("activations/train/manifest.json".into());
    m.heldout = Some("activations/heldout/manifest.json".into());
    m.capture_layers = layers;
    m.save(&s.dir)?;
    s.finish(summary, "capture", started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub config_hash: String,
    pub layers: Vec<usize>,
    pub n_tokens: usize,
    pub matrix: Vec<Vec<f64>>,
}

pub fn distances(s: &Session) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let mut m = s.manifest()?;
    let data = s.dataset(m.dataset.as_ref(), "training")?;
    let layers = m.capture_layers.clone();
    let n_tokens = s.config.distances.n_tokens;
    let d = mean_distance_matrix(&data, &layers, n_tokens)?;
    d.save_csv(&s.path("distances.csv"))?;
    let matrix = (0..d.size()).map(|i| (0..d.size()).map(|j| d.get(i, j)).collect()).collect();
    write_json(
        &s.path("distances.json"),
        &DistanceSummary {
            config_hash: s.config.hash(),
            layers,
            n_tokens,
            matrix,
        },
    )?;
    m.distances = Some("distances.csv".into());
    m.save(&s.dir)?;
    let mut summary = s.summary("distances");
    summary.outputs = vec!["distances.csv".into(), "distances.json".into()];
    s.finish(summary, "distances", started)
}

pub fn cluster(s: &Session, ks: &[usize]) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    if ks.is_empty() {
        bail!(Error::Config("no k requested".into()));
    }
    let mut m = s.manifest()?;
    let rel = m.distances.clone().context("no distance matrix; run `distances` first")?;
    let d = DistanceMatrix::load_csv(&s.path(&rel))?;
    let mut summary = s.summary("cluster");
    for &k in ks {
        let p = agglomerate(&d, k)?;
        let name = format!("partitions/k{k}.json");
        write_text(&s.path(&name), &(p.to_json() + "\n"))?;
        m.partitions.insert(k, name.clone());
        summary.outputs.push(name);
    }
    m.save(&s.dir)?;
    s.finish(summary, "cluster", started)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Baseline,
    Grouped(usize),
}

pub fn baseline_id(layer: usize) -> String {
    format!("base_L{layer}")
}

pub fn group_id(k: usize, j: usize) -> String {
    format!("k{k}_g{j}")
}

/// Seed for one SAE, derived from the experiment seed and the SAE id.
pub fn sae_seed(seed: u64, sae_id: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{sae_id}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

struct TrainJob {
    sae_id: String,
    layers: Vec<usize>,
    k: Option<usize>,
    group: Option<usize>,
}

/// Trains one SAE per layer (baseline) or one per group of the `k`
/// partition, every SAE on the same token budget.
pub fn train(s: &Session, target: TrainTarget) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let mut m = s.manifest()?;
    let data = s.dataset(m.dataset.as_ref(), "training")?;
    let layers = m.capture_layers.clone();
    let jobs: Vec<TrainJob> = match target {
        TrainTarget::Baseline => layers
            .iter()
            .map(|&l| TrainJob {
                sae_id: baseline_id(l),
                layers: vec![l],
                k: None,
                group: None,
            })
            .collect(),
        TrainTarget::Grouped(k) => {
            let rel = m
                .partitions
                .get(&k)
                .ok_or_else(|| Error::Config(format!("no partition for k = {k}; run `cluster --k {k}` first")))?;
            let text = std::fs::read_to_string(s.path(rel))?;
            let p = LayerPartition::from_json(&text)?;
            p.validate(layers.len())?;
            p.groups
                .iter()
                .enumerate()
                .map(|(j, g)| TrainJob {
                    sae_id: group_id(k, j),
                    layers: g.iter().map(|&pos| layers[pos]).collect(),
                    k: Some(k),
                    group: Some(j),
                })
                .collect()
        }
    };
    std::fs::create_dir_all(s.path("saes"))?;
    let results = jobs
        .par_iter()
        .map(|job| -> anyhow::Result<SaeEntry> {
            let seed = sae_seed(s.config.seed, &job.sae_id);
            let config = s.config.sae_config(s.exec_mode, seed)?;
            info!("training {} on layers {:?}", job.sae_id, job.layers);
            let (sae, log) = train_sae::<f32>(&data, &job.layers, &config)
                .with_context(|| format!("training {}", job.sae_id))?;
            let path = format!("saes/{}.saep", job.sae_id);
            write_sae(&sae, seed, log.steps() as u64, &s.path(&path))?;
            write_text(&s.path(&format!("logs/{}.csv", job.sae_id)), &log.to_csv())?;
            Ok(SaeEntry {
                sae_id: job.sae_id.clone(),
                path,
                layers: job.layers.clone(),
                k: job.k,
                group: job.group,
                steps: log.steps() as u64,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let name = match target {
        TrainTarget::Baseline => "train_baseline".to_string(),
        TrainTarget::Grouped(k) => format!("train_k{k}"),
    };
    let mut summary = s.summary(&name);
    for e in results {
        summary.step_counts.insert(e.sae_id.clone(), e.steps);
        summary.outputs.push(e.path.clone());
        summary.outputs.push(format!("logs/{}.csv", e.sae_id));
        m.register_sae(e);
    }
    m.save(&s.dir)?;
    s.finish(summary, &name, started)
}

/// One reconstruction report row: an SAE evaluated at one of its layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sae_id: String,
    pub k: Option<usize>,
    pub layer: usize,
    pub n_examples: usize,
    pub cels: f64,
    pub r2: f64,
    pub l2: f64,
    pub l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcsRow {
    pub sae_id: String,
    pub baseline_id: String,
    pub k: usize,
    pub layer: usize,
    pub mmcs: f64,
}

/// Layer-averaged metrics for the baselines (`k = None`) or one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAverage {
    pub k: Option<usize>,
    pub n_rows: usize,
    pub cels: f64,
    pub r2: f64,
    pub l2: f64,
    pub l0: f64,
    pub mmcs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub averages: Vec<VariantAverage>,
}

pub fn variant_averages(rows: &[EvalRow], mmcs_rows: &[MmcsRow]) -> Vec<VariantAverage> {
    let mut by_k: BTreeMap<Option<usize>, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        by_k.entry(r.k).or_default().push(r);
    }
    by_k.into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let ms: Vec<f64> = mmcs_rows.iter().filter(|r| Some(r.k) == k).map(|r| r.mmcs).collect();
            VariantAverage {
                k,
                n_rows: rs.len(),
                cels: mean(|r| r.cels),
                r2: mean(|r| r.r2),
                l2: mean(|r| r.l2),
                l0: mean(|r| r.l0),
                mmcs: (!ms.is_empty()).then(|| ms.iter().sum::<f64>() / ms.len() as f64),
            }
        })
        .collect()
}

fn opt(k: Option<usize>) -> String {
    k.map_or(String::new(), |k| k.to_string())
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("sae_id,k,layer,n_examples,cels,r2,l2,l0\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.sae_id,
            opt(r.k),
            r.layer,
            r.n_examples,
            r.cels,
            r.r2,
            r.l2,
            r.l0
        );
    }
    out
}

pub fn mmcs_csv(rows: &[MmcsRow]) -> String {
    let mut out = String::from("sae_id,baseline_id,k,layer,mmcs\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.16e}", r.sae_id, r.baseline_id, r.k, r.layer, r.mmcs);
    }
    out
}

/// Reconstruction metrics per (SAE, layer) on held-out data, and MMCS of
/// every grouped SAE against the baseline of each of its layers.
pub fn eval(s: &Session, sae_ids: &[String]) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let c = &s.config;
    let m = s.manifest()?;
    let entries = m.select_saes(sae_ids)?;
    if entries.is_empty() {
        bail!(Error::Config("no SAEs to evaluate".into()));
    }
    let model = s.model(&m)?;
    let (_, held) = s.corpus_split(&m)?;
    let n_seq = c.eval.n_sequences.min(held.len());
    let sequences = &held.sequences[..n_seq];
    let train = s.dataset(m.dataset.as_ref(), "training")?;
    let heldout = s.dataset(m.heldout.as_ref(), "held-out")?;
    let mut needed: Vec<usize> = entries.iter().flat_map(|e| e.layers.iter().copied()).collect();
    needed.sort_unstable();
    needed.dedup();
    let means = needed
        .iter()
        .map(|&l| Ok((l, layer_mean(&train, l)?)))
        .collect::<sae_groups::Result<BTreeMap<_, _>>>()?;
    for e in entries.iter().filter(|e| e.k.is_some()) {
        for &l in &e.layers {
            if m.sae(&baseline_id(l)).is_none() {
                bail!(Error::Config(format!("{} needs baseline {} for MMCS", e.sae_id, baseline_id(l))));
            }
        }
    }
    let ctx = EvalContext::new(&model, sequences, &heldout, &means)?;
    let load = |e: &SaeEntry| -> anyhow::Result<SaeParams<f32>> { Ok(read_sae::<f32>(&s.path(&e.path))?.1) };
    let mut rows = Vec::new();
    let mut mmcs_rows = Vec::new();
    for e in &entries {
        let sae = load(e)?;
        for r in evaluate_sae(&ctx, &e.sae_id, &sae, &e.layers, c.eval.n_examples)? {
            rows.push(EvalRow {
                sae_id: r.sae_id,
                k: e.k,
                layer: r.layer,
                n_examples: r.n_examples,
                cels: r.cels,
                r2: r.r2,
                l2: r.l2,
                l0: r.l0,
            });
        }
        if let Some(k) = e.k {
            for &l in &e.layers {
                let b = m.sae(&baseline_id(l)).expect("checked above");
                mmcs_rows.push(MmcsRow {
                    sae_id: e.sae_id.clone(),
                    baseline_id: b.sae_id.clone(),
                    k,
                    layer: l,
                    mmcs: mmcs(&sae, &load(b)?)?,
                });
            }
        }
    }
    write_text(&s.path("eval/recon.csv"), &eval_csv(&rows))?;
    write_json(&s.path("eval/recon.json"), &rows)?;
    write_text(&s.path("eval/mmcs.csv"), &mmcs_csv(&mmcs_rows))?;
    write_json(&s.path("eval/mmcs.json"), &mmcs_rows)?;
    write_json(
        &s.path("eval/summary.json"),
        &EvalSummary {
            config_hash: c.hash(),
            averages: variant_averages(&rows, &mmcs_rows),
        },
    )?;
    let mut summary = s.summary("eval");
    summary.outputs = ["recon.csv", "recon.json", "mmcs.csv", "mmcs.json", "summary.json"]
        .iter()
        .map(|f| format!("eval/{f}"))
        .collect();
    s.finish(summary, "eval", started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task: String,
    pub hash: String,
    pub n_instances: usize,
    pub solvability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSummary {
    pub config_hash: String,
    pub method: String,
    pub tasks: Vec<TaskStatus>,
    pub warnings: Vec<String>,
    /// Full-reconstruction score per (task, sae_id, layer).
    pub full_scores: Vec<(String, String, usize, f64)>,
}

/// Attribution, then faithfulness and completeness curves over the
/// percentage and count selection grids, for every task, SAE and layer.
pub fn downstream(s: &Session, method: &str, sae_ids: &[String]) -> anyhow::Result<RunSummary> {
    let started = Instant::now();
    let c = &s.config;
    let method = c.ie_method(method)?;
    let m = s.manifest()?;
    let entries = m.select_saes(sae_ids)?;
    if entries.is_empty() {
        bail!(Error::Config("no SAEs to analyse".into()));
    }
    let model = s.model(&m)?;
    let desk = c.desk_config();
    let base = format!("downstream/{}", method.name());
    let percent: Vec<SelectionRule> = PERCENT_GRID.iter().map(|&p| SelectionRule::TopFraction(p)).collect();
    let count: Vec<SelectionRule> = COUNT_GRID.iter().map(|&n| SelectionRule::TopCount(n)).collect();
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    let mut all_ie: Vec<IeScores> = Vec::new();
    let mut pct_points: Vec<CurvePoint> = Vec::new();
    let mut cnt_points: Vec<CurvePoint> = Vec::new();
    let mut full_scores = Vec::new();
    let mut summary = s.summary("downstream");
    let saes = entries
        .iter()
        .map(|e| Ok((e, read_sae::<f32>(&s.path(&e.path))?.1)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    for kind in c.tasks() {
        let task = build_task(kind, c.seed, c.downstream.n_instances, &desk)?;
        let rel = format!("downstream/tasks/{}.jsonl", kind.name());
        write_text(&s.path(&rel), &task.to_jsonl())?;
        summary.outputs.push(rel);
        let solv = solvability(&model, &task)?;
        if solv <= 0.5 {
            let msg = format!("task {} is not solved by the model (accuracy {solv:.3} <= chance)", kind.name());
            warn!("{msg}");
            warnings.push(msg);
        }
        tasks.push(TaskStatus {
            task: kind.name().into(),
            hash: task.hash(),
            n_instances: task.instances.len(),
            solvability: solv,
        });
        for (e, sae) in &saes {
            for &layer in &e.layers {
                info!("{} / {} / layer {layer}", kind.name(), e.sae_id);
                let ie = task_ie(&model, sae, &e.sae_id, layer, &task, method)?;
                let ctx = AblationContext::new(&model, sae, layer, &task)?;
                full_scores.push((kind.name().to_string(), e.sae_id.clone(), layer, ctx.full_score()?));
                pct_points.extend(sweep_curve(&ctx, &ie, &percent)?);
                cnt_points.extend(sweep_curve(&ctx, &ie, &count)?);
                all_ie.push(ie);
            }
        }
    }
    for (name, text) in [
        ("ie.csv", ie_csv(&all_ie)),
        ("curves_percent.csv", curve_csv(&pct_points)),
        ("curves_count.csv", curve_csv(&cnt_points)),
    ] {
        let rel = format!("{base}/{name}");
        write_text(&s.path(&rel), &text)?;
        summary.outputs.push(rel);
    }
    let rel = format!("{base}/summary.json");
    write_json(
        &s.path(&rel),
        &DownstreamSummary {
            config_hash: c.hash(),
            method: method.name().into(),
            tasks,
            warnings,
            full_scores,
        },
    )?;
    summary.outputs.push(rel);
    s.finish(summary, &format!("downstream_{}", method.name()), started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub k: usize,
    pub baseline_steps: u64,
    pub grouped_steps: u64,
    pub speedup: f64,
    /// Number of baseline SAEs over `k`.
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub config_hash: String,
    pub averages: Vec<VariantAverage>,
    pub speedup: Vec<SpeedupRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
}

/// Merges the eval and training summaries of `runs` into per-k averages and
/// a speedup table, written to `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> anyhow::Result<Report> {
    let mut report = Report::default();
    for dir in runs {
        let run = dir.display().to_string();
        let recon = dir.join("eval/recon.json");
        let (rows, mmcs_rows): (Vec<EvalRow>, Vec<MmcsRow>) = if recon.exists() {
            (read_json(&recon)?, read_json(&dir.join("eval/mmcs.json"))?)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut summaries: BTreeMap<String, RunSummary> = BTreeMap::new();
        let sdir = dir.join("summaries");
        if sdir.exists() {
            let mut names: Vec<PathBuf> = std::fs::read_dir(&sdir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            names.sort();
            for p in names.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
                let sm: RunSummary = read_json(&p)?;
                summaries.insert(sm.command.clone(), sm);
            }
        }
        let mut speedup = Vec::new();
        if let Some(b) = summaries.get("train_baseline") {
            let n_base = b.step_counts.len() as f64;
            for (name, sm) in &summaries {
                if let Some(k) = name.strip_prefix("train_k").and_then(|k| k.parse::<usize>().ok()) {
                    speedup.push(SpeedupRow {
                        k,
                        baseline_steps: b.total_steps,
                        grouped_steps: sm.total_steps,
                        speedup: b.total_steps as f64 / sm.total_steps as f64,
                        expected: n_base / k as f64,
                    });
                }
            }
            speedup.sort_by_key(|r| r.k);
        }
        let config_hash = summaries.values().next().map(|s| s.config_hash.clone()).unwrap_or_default();
        report.runs.push(RunReport {
            run,
            config_hash,
            averages: variant_averages(&rows, &mmcs_rows),
            speedup,
        });
    }
    let mut avg = String::from("run,k,n_rows,cels,r2,l2,l0,mmcs\n");
    let mut sp = String::from("run,k,baseline_steps,grouped_steps,speedup,expected\n");
    for r in &report.runs {
        for a in &r.averages {
            let _ = writeln!(
                avg,
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.run,
                opt(a.k),
                a.n_rows,
                a.cels,
                a.r2,
                a.l2,
                a.l0,
                a.mmcs.map_or(String::new(), |v| format!("{v:.16e}"))
            );
        }
        for x in &r.speedup {
            let _ = writeln!(
                sp,
                "{},{},{},{},{:.16e},{:.16e}",
                r.run, x.k, x.baseline_steps, x.grouped_steps, x.speedup, x.expected
            );
        }
    }
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report_averages.csv"), &avg)?;
    write_text(&out.join("report_speedup.csv"), &sp)?;
    Ok(report)
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
