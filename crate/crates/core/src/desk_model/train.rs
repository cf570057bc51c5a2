use rayon::prelude::*;

use super::backward::accumulate_training_grads;
use super::corpus::Corpus;
use super::DeskParams;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, ExecMode, RngStream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DeskTrainConfig {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_steps` and decayed linearly
    /// to 10% of its value by the last step.
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub exec_mode: ExecMode,
}

impl Default for DeskTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            exec_mode: ExecMode::Deterministic,
        }
    }
}

impl DeskTrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let frac = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        self.lr * warm * (1.0 - 0.9 * frac)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeskTrainLog {
    /// Mean training cross-entropy of each step's batch.
    pub losses: Vec<f64>,
}

/// Next-token training with Adam on sequences sampled uniformly with
/// replacement from `corpus`.
pub fn train_desk_model<T: Scalar>(
    mut params: DeskParams<T>,
    corpus: &Corpus,
    config: &DeskTrainConfig,
) -> Result<(DeskParams<T>, DeskTrainLog)> {
    let mut log = DeskTrainLog::default();
    if config.steps == 0 {
        return Ok((params, log));
    }
    if corpus.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("training needs a non-empty corpus and batch".into()));
    }
    let mut rng = RngStream::with_stream(config.seed, 0xD5);
    let mut states: Vec<AdamState<T>> = params
        .blocks()
        .iter()
        .map(|(name, b)| AdamState::new(name.clone(), b.len(), config.adam))
        .collect();
    for step in 0..config.steps {
        let batch: Vec<Vec<u32>> = (0..config.batch_size)
            .map(|_| corpus.sequences[rng.index(corpus.len())].clone())
            .collect();
        let (loss, mut grads) = batch_grads(&params, &batch, config.exec_mode)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training {
                step,
                reason: "desk model loss or gradient is not finite".into(),
            });
        }
        if config.clip_norm > 0.0 {
            let norm = grads
                .blocks()
                .iter()
                .flat_map(|(_, b)| b.iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > config.clip_norm {
                let s = T::lit(config.clip_norm / norm);
                for (_, b) in grads.blocks_mut() {
                    b.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = T::lit(config.lr_at(step));
        for ((state, (_, p)), (_, g)) in states.iter_mut().zip(params.blocks_mut()).zip(grads.blocks()) {
            state.step(p, g, lr).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
        }
        log.losses.push(loss);
    }
    Ok((params, log))
}

/// Sequences are split into fixed groups of four; partial gradients are
/// summed in group order, so deterministic mode does not depend on the
/// thread count.
fn batch_grads<T: Scalar>(params: &DeskParams<T>, batch: &[Vec<u32>], mode: ExecMode) -> Result<(f64, DeskParams<T>)> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let chunk = |seqs: &[Vec<u32>]| -> Result<(f64, DeskParams<T>)> {
        let mut g = DeskParams::zeros(&params.config);
        let n: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        let loss = accumulate_training_grads(params, seqs, &mut g)?;
        // Rescale from the chunk mean to the batch mean.
        let s = T::lit(n as f64 / total as f64);
        for (_, b) in g.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
        Ok((loss * n as f64 / total as f64, g))
    };
    let merge = |(la, mut ga): (f64, DeskParams<T>), (lb, gb): (f64, DeskParams<T>)| {
        ga.add_assign(&gb);
        (la + lb, ga)
    };
    match mode {
        ExecMode::Deterministic => {
            let parts = batch.par_chunks(4).map(chunk).collect::<Result<Vec<_>>>()?;
            Ok(parts.into_iter().reduce(merge).expect("non-empty batch"))
        }
        ExecMode::Parallel => batch
            .par_chunks(4)
            .map(chunk)
            .try_reduce(|| (0.0, DeskParams::zeros(&params.config)), |a, b| Ok(merge(a, b))),
    }
}
