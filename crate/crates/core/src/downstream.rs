//! Counterfactual tasks and causal feature attribution: exact indirect
//! effects, attribution patching, integrated gradients, feature selection,
//! and faithfulness / completeness of selected feature sets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::desk_model::{
    agreement_prompt, forward, forward_spliced, grad_wrt_features_at, greater_than_prompt, ioi_prompt,
    vocab, DeskConfig, DeskParams, FeatureOverride, SpliceSpec, TemplateKind,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::sae::SaeParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub x_clean: Vec<u32>,
    pub x_patch: Vec<u32>,
    pub a_clean: u32,
    pub a_patch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub kind: TemplateKind,
    pub seed: u64,
    pub instances: Vec<TaskInstance>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    kind: String,
    seed: u64,
}

impl TaskSet {
    /// JSON lines: a `{"kind", "seed"}` header followed by one instance per line.
    pub fn to_jsonl(&self) -> String {
        let header = TaskHeader {
            kind: self.kind.name().to_string(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("serializable");
        out.push('\n');
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TaskHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::Data(format!("task header: {e}")))?;
        let kind = TemplateKind::parse(&header.kind)
            .ok_or_else(|| Error::Data(format!("unknown task kind {}", header.kind)))?;
        let instances = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<TaskInstance>(l)
                    .map_err(|e| Error::Data(format!("task instance {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let task = Self {
            kind,
            seed: header.seed,
            instances,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn hash(&self) -> String {
        crate::desk_model::hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::Data("task set is empty".into()));
        }
        for (i, t) in self.instances.iter().enumerate() {
            if t.x_clean.len() != t.x_patch.len() || t.x_clean.is_empty() {
                return Err(Error::Data(format!("instance {i} is not position-aligned")));
            }
            if t.a_clean == t.a_patch {
                return Err(Error::Data(format!("instance {i} has identical answers")));
            }
        }
        Ok(())
    }
}

/// `n` counterfactual pairs of the given template. The patch prompt differs
/// from the clean one in a single slot: the start year (greater-than), the
/// repeated subject name (IOI) or the first noun's number (agreement).
pub fn build_task(kind: TemplateKind, seed: u64, n: usize, config: &DeskConfig) -> Result<TaskSet> {
    if config.vocab < vocab::TEMPLATE_ALPHABET {
        return Err(Error::Config(format!(
            "vocab {} does not contain the template alphabet",
            config.vocab
        )));
    }
    if n == 0 {
        return Err(Error::Config("task size must be positive".into()));
    }
    let mut rng = RngStream::with_stream(seed, 0x7A5C);
    let instances = (0..n)
        .map(|_| match kind {
            TemplateKind::GreaterThan => {
                let event = rng.below(5) as u32;
                let s_c = rng.between(20, 89) as u32;
                let s_p = s_c - rng.between(5, 15) as u32;
                let a_patch = rng.between(s_p as u64 + 1, s_c as u64 - 1) as u32;
                let a_clean = s_c + rng.between(1, 9.min(99 - s_c as u64)) as u32;
                TaskInstance {
                    x_clean: greater_than_prompt(event, s_c),
                    x_patch: greater_than_prompt(event, s_p),
                    a_clean: vocab::year(a_clean),
                    a_patch: vocab::year(a_patch),
                }
            }
            TemplateKind::Ioi => {
                let n_names = (vocab::NAMES.end - vocab::NAMES.start) as u64;
                let a = rng.below(n_names) as u32;
                let b = (a + 1 + rng.below(n_names - 1) as u32) % n_names as u32;
                let place = rng.below(8) as u32;
                let object = rng.below(16) as u32;
                TaskInstance {
                    x_clean: ioi_prompt(a, b, place, b, object),
                    x_patch: ioi_prompt(a, b, place, a, object),
                    a_clean: vocab::NAMES.start + a,
                    a_patch: vocab::NAMES.start + b,
                }
            }
            TemplateKind::Agreement => {
                let n1 = rng.below(vocab::N_NOUN_LEMMAS as u64) as u32;
                let n2 = rng.below(vocab::N_NOUN_LEMMAS as u64) as u32;
                let p1 = rng.below(2) == 1;
                let p2 = rng.below(2) == 1;
                let v = rng.below(vocab::N_VERB_LEMMAS as u64) as u32;
                TaskInstance {
                    x_clean: agreement_prompt(n1, p1, n2, p2),
                    x_patch: agreement_prompt(n1, !p1, n2, p2),
                    a_clean: vocab::verb(v, p1),
                    a_patch: vocab::verb(v, !p1),
                }
            }
        })
        .collect();
    Ok(TaskSet { kind, seed, instances })
}

/// `logit(a_clean) - logit(a_patch)` at the final row of `logits`.
pub fn logit_diff<T: Scalar>(logits: &Matrix<T>, a_clean: u32, a_patch: u32) -> f64 {
    let last = logits.row(logits.rows() - 1);
    last[a_clean as usize].as_f64() - last[a_patch as usize].as_f64()
}

pub fn metric<T: Scalar>(model: &DeskParams<T>, tokens: &[u32], a_clean: u32, a_patch: u32) -> Result<f64> {
    let (logits, _) = forward(model, tokens)?;
    Ok(logit_diff(&logits, a_clean, a_patch))
}

/// Fraction of instances where the model's metric on the clean prompt is
/// positive, i.e. it prefers `a_clean` over `a_patch`. Chance is 0.5.
pub fn solvability<T: Scalar>(model: &DeskParams<T>, task: &TaskSet) -> Result<f64> {
    let mut ok = 0usize;
    for t in &task.instances {
        if metric(model, &t.x_clean, t.a_clean, t.a_patch)? > 0.0 {
            ok += 1;
        }
    }
    Ok(ok as f64 / task.instances.len() as f64)
}

/// A task metric viewed as a function of the feature activations at the
/// intervention site, with its gradient.
pub trait FeatureReadout {
    fn d_sae(&self) -> usize;
    fn metric_at(&self, f: &[f64]) -> Result<f64>;
    fn grad_at(&self, f: &[f64]) -> Result<Vec<f64>>;
}

/// The desk model with an SAE spliced in at `layer`; the intervention site
/// is the final position of `tokens`.
pub struct DeskReadout<'a, T> {
    model: &'a DeskParams<T>,
    sae: &'a SaeParams<T>,
    layer: usize,
    tokens: &'a [u32],
    a_clean: u32,
    a_patch: u32,
    f_base: Vec<T>,
    metric_grad: Vec<T>,
}

impl<'a, T: Scalar> DeskReadout<'a, T> {
    pub fn new(
        model: &'a DeskParams<T>,
        sae: &'a SaeParams<T>,
        layer: usize,
        tokens: &'a [u32],
        a_clean: u32,
        a_patch: u32,
    ) -> Result<Self> {
        let f_base = final_features(model, sae, layer, tokens)?;
        let mut metric_grad = vec![T::zero(); model.config.vocab];
        metric_grad[a_clean as usize] = T::one();
        metric_grad[a_patch as usize] = -T::one();
        Ok(Self {
            model,
            sae,
            layer,
            tokens,
            a_clean,
            a_patch,
            f_base,
            metric_grad,
        })
    }

    /// Features at the final position of the unmodified spliced run.
    pub fn base_features(&self) -> Vec<f64> {
        self.f_base.iter().map(|v| v.as_f64()).collect()
    }

    fn overrides(&self, f: &[f64]) -> Result<Vec<FeatureOverride<T>>> {
        if f.len() != self.f_base.len() {
            return Err(Error::Shape(format!(
                "{} feature values for an SAE of width {}",
                f.len(),
                self.f_base.len()
            )));
        }
        let position = self.tokens.len() - 1;
        Ok(f.iter()
            .zip(&self.f_base)
            .enumerate()
            .filter(|(_, (&v, &b))| T::lit(v) != b)
            .map(|(feature, (&v, _))| FeatureOverride {
                position,
                feature,
                value: T::lit(v),
            })
            .collect())
    }
}

impl<T: Scalar> FeatureReadout for DeskReadout<'_, T> {
    fn d_sae(&self) -> usize {
        self.sae.d_sae()
    }

    fn metric_at(&self, f: &[f64]) -> Result<f64> {
        let spec = SpliceSpec::override_features(self.layer, self.overrides(f)?);
        let out = forward_spliced(self.model, self.tokens, &spec, Some(self.sae))?;
        Ok(logit_diff(&out.logits, self.a_clean, self.a_patch))
    }

    fn grad_at(&self, f: &[f64]) -> Result<Vec<f64>> {
        let ov = self.overrides(f)?;
        let (g, _) = grad_wrt_features_at(self.model, self.tokens, self.sae, self.layer, &ov, &self.metric_grad)?;
        Ok(g.iter().map(|v| v.as_f64()).collect())
    }
}

/// Final-position feature activations with the SAE reconstruction spliced at `layer`.
pub fn final_features<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    tokens: &[u32],
) -> Result<Vec<T>> {
    let out = forward_spliced(model, tokens, &SpliceSpec::reconstruction(&[layer]), Some(sae))?;
    let (_, f) = &out.features[0];
    Ok(f.row(f.rows() - 1).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IeMethod {
    Exact,
    Atp,
    /// Integrated gradients with `steps` points; `averaged` divides the sum by `steps`.
    Ig { steps: usize, averaged: bool },
}

impl IeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Atp => "atp",
            Self::Ig { averaged: true, .. } => "ig",
            Self::Ig { averaged: false, .. } => "ig-sum",
        }
    }

    /// `exact`, `atp`, `ig` (10 steps, averaged) or `ig-sum` (10 steps, unnormalized sum).
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Self::Exact),
            "atp" => Some(Self::Atp),
            "ig" => Some(Self::Ig {
                steps: 10,
                averaged: true,
            }),
            "ig-sum" => Some(Self::Ig {
                steps: 10,
                averaged: false,
            }),
            _ => None,
        }
    }
}

fn check_pair(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64]) -> Result<()> {
    if f_clean.len() != r.d_sae() || f_patch.len() != r.d_sae() {
        return Err(Error::Shape("feature vectors do not match the SAE width".into()));
    }
    Ok(())
}

/// `m(do(f_i = f_patch_i)) - m(f_clean)` for one feature.
pub fn exact_ie_feature(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64], i: usize) -> Result<f64> {
    check_pair(r, f_clean, f_patch)?;
    if f_clean[i] == f_patch[i] {
        return Ok(0.0);
    }
    let base = r.metric_at(f_clean)?;
    let mut f = f_clean.to_vec();
    f[i] = f_patch[i];
    Ok(r.metric_at(&f)? - base)
}

/// Exact indirect effect of every feature; features with `f_clean == f_patch`
/// are exactly zero and cost nothing.
pub fn exact_ie_all(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64]) -> Result<Vec<f64>> {
    check_pair(r, f_clean, f_patch)?;
    let base = r.metric_at(f_clean)?;
    let mut out = vec![0.0; r.d_sae()];
    let mut f = f_clean.to_vec();
    for i in 0..r.d_sae() {
        if f_clean[i] != f_patch[i] {
            f[i] = f_patch[i];
            out[i] = r.metric_at(&f)? - base;
            f[i] = f_clean[i];
        }
    }
    Ok(out)
}

/// `grad m(f_clean) * (f_patch - f_clean)`, elementwise.
pub fn atp_ie(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64]) -> Result<Vec<f64>> {
    check_pair(r, f_clean, f_patch)?;
    let g = r.grad_at(f_clean)?;
    Ok(g.iter()
        .zip(f_clean.iter().zip(f_patch))
        .map(|(&g, (&c, &p))| g * (p - c))
        .collect())
}

/// Sum over `alpha in {0, 1/N, ..., (N-1)/N}` of the gradient at
/// `alpha f_clean + (1 - alpha) f_patch`, times `(f_patch - f_clean)`;
/// divided by `N` when `averaged`.
pub fn ig_ie(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64], steps: usize, averaged: bool) -> Result<Vec<f64>> {
    check_pair(r, f_clean, f_patch)?;
    if steps == 0 {
        return Err(Error::Config("integrated gradients need at least one step".into()));
    }
    let mut acc = vec![0.0; r.d_sae()];
    let mut point = vec![0.0; r.d_sae()];
    for s in 0..steps {
        let alpha = s as f64 / steps as f64;
        for ((p, &c), &q) in point.iter_mut().zip(f_clean).zip(f_patch) {
            *p = alpha * c + (1.0 - alpha) * q;
        }
        let g = r.grad_at(&point)?;
        for (a, g) in acc.iter_mut().zip(g) {
            *a += g;
        }
    }
    let scale = if averaged { 1.0 / steps as f64 } else { 1.0 };
    Ok(acc
        .iter()
        .zip(f_clean.iter().zip(f_patch))
        .map(|(&a, (&c, &p))| a * scale * (p - c))
        .collect())
}

pub fn compute_ie(r: &dyn FeatureReadout, f_clean: &[f64], f_patch: &[f64], method: IeMethod) -> Result<Vec<f64>> {
    let ie = match method {
        IeMethod::Exact => exact_ie_all(r, f_clean, f_patch)?,
        IeMethod::Atp => atp_ie(r, f_clean, f_patch)?,
        IeMethod::Ig { steps, averaged } => ig_ie(r, f_clean, f_patch, steps, averaged)?,
    };
    if ie.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {} indirect effect", method.name())));
    }
    Ok(ie)
}

/// Exact indirect effect of feature `feature` on one task instance, with the
/// SAE spliced at `layer` in both runs.
pub fn exact_ie<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    instance: &TaskInstance,
    feature: usize,
) -> Result<f64> {
    if feature >= sae.d_sae() {
        return Err(Error::Config(format!("feature {feature} outside the SAE")));
    }
    let r = DeskReadout::new(model, sae, layer, &instance.x_clean, instance.a_clean, instance.a_patch)?;
    let f_patch = to_f64(&final_features(model, sae, layer, &instance.x_patch)?);
    exact_ie_feature(&r, &r.base_features(), &f_patch, feature)
}

pub fn atp_ie_instance<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    instance: &TaskInstance,
) -> Result<Vec<f64>> {
    instance_ie(model, sae, layer, instance, IeMethod::Atp)
}

pub fn instance_ie<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    instance: &TaskInstance,
    method: IeMethod,
) -> Result<Vec<f64>> {
    let r = DeskReadout::new(model, sae, layer, &instance.x_clean, instance.a_clean, instance.a_patch)?;
    let f_patch = to_f64(&final_features(model, sae, layer, &instance.x_patch)?);
    compute_ie(&r, &r.base_features(), &f_patch, method)
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Task-level attribution: per-feature IE averaged over instances, and
/// which features are active (nonzero clean activation on some instance).
#[derive(Debug, Clone, PartialEq)]
pub struct IeScores {
    pub task: String,
    pub sae_id: String,
    pub layer: usize,
    pub method: IeMethod,
    pub scores: Vec<f64>,
    pub active: Vec<bool>,
}

impl IeScores {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

pub fn task_ie<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    sae_id: &str,
    layer: usize,
    task: &TaskSet,
    method: IeMethod,
) -> Result<IeScores> {
    task.validate()?;
    let d_sae = sae.d_sae();
    let mut scores = vec![0.0; d_sae];
    let mut active = vec![false; d_sae];
    for inst in &task.instances {
        let r = DeskReadout::new(model, sae, layer, &inst.x_clean, inst.a_clean, inst.a_patch)?;
        let f_clean = r.base_features();
        let f_patch = to_f64(&final_features(model, sae, layer, &inst.x_patch)?);
        let ie = compute_ie(&r, &f_clean, &f_patch, method)?;
        for j in 0..d_sae {
            scores[j] += ie[j];
            active[j] |= f_clean[j] != 0.0;
        }
    }
    let n = task.instances.len() as f64;
    scores.iter_mut().for_each(|s| *s /= n);
    Ok(IeScores {
        task: task.kind.name().to_string(),
        sae_id: sae_id.to_string(),
        layer,
        method,
        scores,
        active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionRule {
    /// The top `ceil(p * n_active)` active features, `p` in `[0, 1]`.
    TopFraction(f64),
    TopCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ranking {
    #[default]
    Absolute,
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    /// Selected feature indices in rank order.
    pub indices: Vec<usize>,
    pub rule: SelectionRule,
    pub ranking: Ranking,
    pub n_active: usize,
}

/// Ranks active features by IE (absolute value by default, ties to the
/// lower index) and keeps the top of the list.
pub fn select_features(ie: &[f64], active: &[bool], rule: SelectionRule, ranking: Ranking) -> Result<FeatureSelection> {
    if ie.len() != active.len() {
        return Err(Error::Shape("IE and activity masks differ in length".into()));
    }
    let mut order: Vec<usize> = (0..ie.len()).filter(|&j| active[j]).collect();
    let n_active = order.len();
    let key = |j: usize| match ranking {
        Ranking::Absolute => ie[j].abs(),
        Ranking::Signed => ie[j],
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let take = match rule {
        SelectionRule::TopCount(n) => n.min(n_active),
        SelectionRule::TopFraction(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("selection fraction {p} outside [0, 1]")));
            }
            ((p * n_active as f64).ceil() as usize).min(n_active)
        }
    };
    order.truncate(take);
    Ok(FeatureSelection {
        indices: order,
        rule,
        ranking,
        n_active,
    })
}

/// Per-feature mean of the final-position clean activations over the task.
pub fn mean_feature_activations<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    task: &TaskSet,
) -> Result<Vec<f64>> {
    task.validate()?;
    let mut mean = vec![0.0; sae.d_sae()];
    for inst in &task.instances {
        for (m, v) in mean.iter_mut().zip(final_features(model, sae, layer, &inst.x_clean)?) {
            *m += v.as_f64();
        }
    }
    let n = task.instances.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Task-mean metrics shared by faithfulness and completeness: the clean
/// model, the full reconstruction and the all-features-mean-ablated run.
#[derive(Debug, Clone)]
pub struct AblationContext<'a, T> {
    model: &'a DeskParams<T>,
    sae: &'a SaeParams<T>,
    layer: usize,
    task: &'a TaskSet,
    means: Vec<T>,
    clean_features: Vec<Vec<T>>,
    pub m_model: f64,
    pub m_full: f64,
    pub m_empty: f64,
}

impl<'a, T: Scalar> AblationContext<'a, T> {
    pub fn new(model: &'a DeskParams<T>, sae: &'a SaeParams<T>, layer: usize, task: &'a TaskSet) -> Result<Self> {
        let means = mean_feature_activations(model, sae, layer, task)?;
        let mut ctx = Self {
            model,
            sae,
            layer,
            task,
            means: means.iter().map(|&m| T::lit(m)).collect(),
            clean_features: task
                .instances
                .iter()
                .map(|i| final_features(model, sae, layer, &i.x_clean))
                .collect::<Result<_>>()?,
            m_model: 0.0,
            m_full: 0.0,
            m_empty: 0.0,
        };
        let n = task.instances.len() as f64;
        ctx.m_model = task
            .instances
            .iter()
            .map(|i| metric(model, &i.x_clean, i.a_clean, i.a_patch))
            .sum::<Result<f64>>()?
            / n;
        ctx.m_full = ctx.task_metric(|_| false)?;
        ctx.m_empty = ctx.task_metric(|_| true)?;
        Ok(ctx)
    }

    pub fn means(&self) -> Vec<f64> {
        to_f64(&self.means)
    }

    /// Task-mean metric with features where `ablate(j)` set to their means.
    /// Features already at their mean are not overridden.
    pub fn task_metric(&self, ablate: impl Fn(usize) -> bool) -> Result<f64> {
        let mut total = 0.0;
        for (inst, f) in self.task.instances.iter().zip(&self.clean_features) {
            let position = inst.x_clean.len() - 1;
            let overrides: Vec<FeatureOverride<T>> = (0..f.len())
                .filter(|&j| ablate(j) && f[j] != self.means[j])
                .map(|j| FeatureOverride {
                    position,
                    feature: j,
                    value: self.means[j],
                })
                .collect();
            let spec = SpliceSpec::override_features(self.layer, overrides);
            let out = forward_spliced(self.model, &inst.x_clean, &spec, Some(self.sae))?;
            total += logit_diff(&out.logits, inst.a_clean, inst.a_patch);
        }
        Ok(total / self.task.instances.len() as f64)
    }

    fn normalized(&self, m_c: f64) -> Result<f64> {
        let denom = self.m_model - self.m_empty;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Numeric(
                "clean and mean-ablated task metrics coincide".into(),
            ));
        }
        Ok((m_c - self.m_empty) / denom)
    }

    /// Score of the full reconstruction, `(m(full) - m(empty)) / (m(M) - m(empty))`.
    pub fn full_score(&self) -> Result<f64> {
        self.normalized(self.m_full)
    }

    /// Selected features live, all others mean-ablated.
    pub fn faithfulness(&self, selection: &[usize]) -> Result<f64> {
        let keep = mask(self.sae.d_sae(), selection);
        self.normalized(self.task_metric(|j| !keep[j])?)
    }

    /// Selected features mean-ablated, all others live.
    pub fn completeness(&self, selection: &[usize]) -> Result<f64> {
        let drop = mask(self.sae.d_sae(), selection);
        self.normalized(self.task_metric(|j| drop[j])?)
    }
}

fn mask(n: usize, selection: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &j in selection {
        if j < n {
            m[j] = true;
        }
    }
    m
}

pub fn faithfulness<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    task: &TaskSet,
    selection: &FeatureSelection,
) -> Result<f64> {
    AblationContext::new(model, sae, layer, task)?.faithfulness(&selection.indices)
}

pub fn completeness<T: Scalar>(
    model: &DeskParams<T>,
    sae: &SaeParams<T>,
    layer: usize,
    task: &TaskSet,
    selection: &FeatureSelection,
) -> Result<f64> {
    AblationContext::new(model, sae, layer, task)?.completeness(&selection.indices)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length samples of size >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("spearman of a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// One point of a faithfulness / completeness curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task: String,
    pub sae_id: String,
    pub layer: usize,
    pub selection_size: usize,
    pub faithfulness: f64,
    pub completeness: f64,
}

pub const PERCENT_GRID: [f64; 8] = [0.0, 0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.0];
pub const COUNT_GRID: [usize; 7] = [0, 1, 2, 5, 10, 20, 50];

/// Faithfulness and completeness at each selection rule, ranking by `ie`.
pub fn sweep_curve<T: Scalar>(ctx: &AblationContext<'_, T>, ie: &IeScores, rules: &[SelectionRule]) -> Result<Vec<CurvePoint>> {
    rules
        .iter()
        .map(|&rule| {
            let sel = select_features(&ie.scores, &ie.active, rule, Ranking::Absolute)?;
            Ok(CurvePoint {
                task: ie.task.clone(),
                sae_id: ie.sae_id.clone(),
                layer: ie.layer,
                selection_size: sel.indices.len(),
                faithfulness: ctx.faithfulness(&sel.indices)?,
                completeness: ctx.completeness(&sel.indices)?,
            })
        })
        .collect()
}

pub fn ie_csv(scores: &[IeScores]) -> String {
    let mut out = String::from("task,sae_id,layer,method,feature,ie\n");
    for s in scores {
        for (j, v) in s.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{},{:.16e}", s.task, s.sae_id, s.layer, s.method.name(), j, v);
        }
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("task,sae_id,layer,selection_size,faithfulness,completeness\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.16e},{:.16e}",
            p.task, p.sae_id, p.layer, p.selection_size, p.faithfulness, p.completeness
        );
    }
    out
}
