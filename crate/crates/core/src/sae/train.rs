use std::fmt::Write as _;

use super::grads::{normalize_decoder_columns, project_decoder_grads, sae_grads_with};
use super::{Activation, SaeParams};
use crate::activation_store::{pooled_mean, ActivationDataset, BatchSampler};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, ExecMode, Matrix, RngStream};
use crate::scalar::Scalar;

/// SAE training hyperparameters. Defaults are the production settings
/// (expansion 8, lambda 1, lr 3e-5, batch 4096, Adam betas (0, 0.999),
/// 1B tokens, lr decay over the last 20% of steps, L1 warm-up over the
/// first 5%, checkpoints every 200M tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainConfig {
    pub expansion: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub total_tokens: u64,
    pub lr_decay_fraction: f64,
    pub l1_warmup_fraction: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every_tokens: u64,
    pub seed: u64,
    pub activation: Activation,
    /// Width of the rectangular kernel in the threshold pseudo-derivative.
    pub theta_bandwidth: f64,
    pub theta_init: f64,
    /// Expected L2 norm of each encoder row at initialization.
    pub encoder_init_norm: f64,
    pub exec_mode: ExecMode,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            lambda: 1.0,
            lr: 3e-5,
            batch_size: 4096,
            adam: AdamConfig {
                beta1: 0.0,
                beta2: 0.999,
                eps: 1e-8,
            },
            total_tokens: 1_000_000_000,
            lr_decay_fraction: 0.2,
            l1_warmup_fraction: 0.05,
            checkpoint_every_tokens: 200_000_000,
            seed: 0,
            activation: Activation::HeavisideJumpRelu,
            theta_bandwidth: 0.001,
            theta_init: 0.001,
            encoder_init_norm: 0.1,
            exec_mode: ExecMode::Deterministic,
        }
    }
}

impl SaeTrainConfig {
    /// Optimizer steps implied by the token budget.
    pub fn total_steps(&self) -> usize {
        if self.batch_size == 0 {
            return 0;
        }
        (self.total_tokens / self.batch_size as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.lr_decay_fraction) || !frac_ok(self.l1_warmup_fraction) {
            return Err(Error::Config("schedule fractions must lie in [0, 1]".into()));
        }
        if !(self.lambda > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("lambda and lr must be positive".into()));
        }
        if self.batch_size == 0 || self.expansion == 0 {
            return Err(Error::Config("batch size and expansion must be positive".into()));
        }
        if !(self.theta_bandwidth >= 0.0) || !(self.theta_init >= 0.0) {
            return Err(Error::Config("threshold settings must be non-negative".into()));
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.adam.beta1) || !beta_ok(self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate and L1 coefficient at `step`: L1 ramps linearly from 0 over
/// the warm-up window, lr is constant then decays linearly towards 0 over
/// the decay window.
pub fn schedule_at(config: &SaeTrainConfig, step: usize) -> Result<(f64, f64)> {
    let total = config.total_steps();
    if step >= total {
        return Err(Error::Config(format!("step {step} outside schedule of {total} steps")));
    }
    let warm = (config.l1_warmup_fraction * total as f64).round() as usize;
    let lambda = if step < warm {
        config.lambda * step as f64 / warm as f64
    } else {
        config.lambda
    };
    let decay = (config.lr_decay_fraction * total as f64).round() as usize;
    let decay_start = total - decay;
    let lr = if step >= decay_start {
        config.lr * (total - step) as f64 / decay as f64
    } else {
        config.lr
    };
    Ok((lr, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub recon: f64,
    pub l1: f64,
    pub l0: f64,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Steps after which a checkpoint was emitted.
    pub checkpoints: Vec<usize>,
    /// Decoder columns that never received a nonzero update.
    pub zero_columns: usize,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,recon,l1,l0,lr_t,lambda_t\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.step, r.recon, r.l1, r.l0, r.lr, r.lambda
            );
        }
        out
    }
}

pub fn train_sae<T: Scalar>(
    dataset: &ActivationDataset,
    layers: &[usize],
    config: &SaeTrainConfig,
) -> Result<(SaeParams<T>, TrainLog)> {
    train_sae_with(dataset, layers, config, |_, _| Ok(()))
}

/// Trains one SAE on the pooled activations of `layers`.
///
/// The decoder starts at zero; column normalization applies to every column
/// once it has received a nonzero update. `on_checkpoint` is called with the
/// completed step count whenever another `checkpoint_every_tokens` tokens
/// have been consumed.
pub fn train_sae_with<T, F>(
    dataset: &ActivationDataset,
    layers: &[usize],
    config: &SaeTrainConfig,
    mut on_checkpoint: F,
) -> Result<(SaeParams<T>, TrainLog)>
where
    T: Scalar,
    F: FnMut(usize, &SaeParams<T>) -> Result<()>,
{
    config.validate()?;
    if layers.is_empty() {
        return Err(Error::Config("cannot train an SAE on an empty layer group".into()));
    }
    let root = RngStream::new(config.seed);
    let mut init_rng = root.fork(1);
    let mut sampler = BatchSampler::new(layers, config.batch_size, root.fork(2))?;
    let mean = pooled_mean(dataset, layers)?;
    let d = dataset.d_model();
    let mut sae = SaeParams::<T>::init(
        d,
        config.expansion,
        &mean,
        config.encoder_init_norm,
        config.theta_init,
        config.activation,
        &mut init_rng,
    )?;
    let mut states: Vec<AdamState<T>> = sae
        .blocks_mut()
        .iter()
        .map(|(name, b)| AdamState::new(*name, b.len(), config.adam))
        .collect();

    let total = config.total_steps();
    let mut log = TrainLog::default();
    let mut raw = Matrix::<f32>::zeros(config.batch_size, d);
    let mut decoder_live = false;
    let every = config.checkpoint_every_tokens;
    for step in 0..total {
        sampler.sample_into(dataset, &mut raw, None)?;
        let x: Matrix<T> = raw.cast();
        let (lr, lambda) = schedule_at(config, step)?;
        let (mut grads, stats) =
            sae_grads_with(&sae, &x, lambda, config.theta_bandwidth, Some(config.exec_mode))
                .map_err(|e| Error::Training {
                    step,
                    reason: e.to_string(),
                })?;
        if !stats.recon.is_finite() || !stats.l1.is_finite() {
            return Err(Error::Training {
                step,
                reason: "loss is not finite".into(),
            });
        }
        if decoder_live {
            project_decoder_grads(&sae, &mut grads);
        }
        let lr_t = T::lit(lr);
        for ((state, (_, params)), g) in states.iter_mut().zip(sae.blocks_mut()).zip(grads.blocks()) {
            state.step(params, g, lr_t).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
        }
        for t in sae.theta.iter_mut() {
            if *t < T::zero() {
                *t = T::zero();
            }
        }
        log.zero_columns = normalize_decoder_columns(&mut sae);
        decoder_live = true;
        log.records.push(StepRecord {
            step,
            recon: stats.recon,
            l1: stats.l1,
            l0: stats.l0,
            lr,
            lambda,
        });
        if every > 0 {
            let bs = config.batch_size as u64;
            let before = step as u64 * bs / every;
            let after = (step as u64 + 1) * bs / every;
            if after > before {
                on_checkpoint(step + 1, &sae)?;
                log.checkpoints.push(step + 1);
            }
        }
    }
    Ok((sae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg(total_tokens: u64, batch: usize) -> SaeTrainConfig {
        SaeTrainConfig {
            total_tokens,
            batch_size: batch,
            checkpoint_every_tokens: 0,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_starts_at_zero() {
        let c = cfg(1000 * 10, 10);
        assert_eq!(schedule_at(&c, 0).unwrap(), (c.lr, 0.0));
    }

    #[test]
    fn lambda_full_at_warmup_boundary() {
        let c = cfg(1000 * 10, 10);
        let (_, lam) = schedule_at(&c, 50).unwrap();
        assert_eq!(lam, c.lambda);
        let (_, lam) = schedule_at(&c, 25).unwrap();
        assert!((lam - 0.5 * c.lambda).abs() < 1e-15);
    }

    #[test]
    fn final_step_learning_rate() {
        // 1000 steps: decay window is 200 steps starting at step 800;
        // the last step (999) gets lr * 1/200.
        let c = cfg(1000 * 10, 10);
        let (lr, _) = schedule_at(&c, 999).unwrap();
        assert!((lr - c.lr / 200.0).abs() < 1e-20);
        assert!(lr > 0.0);
        assert_eq!(schedule_at(&c, 799).unwrap().0, c.lr);
        assert_eq!(schedule_at(&c, 800).unwrap().0, c.lr);
        assert!(matches!(schedule_at(&c, 1000), Err(Error::Config(_))));
    }

    fn toy_dataset() -> ActivationDataset {
        let mut rng = RngStream::new(77);
        let mut map = BTreeMap::new();
        map.insert(0, Matrix::from_vec(64, 4, rng.normal_vec::<f32>(256, 1.0)));
        ActivationDataset::from_layers(map).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = toy_dataset();
        let c = SaeTrainConfig {
            total_tokens: 0,
            batch_size: 8,
            expansion: 2,
            seed: 3,
            ..Default::default()
        };
        let (sae, log) = train_sae::<f64>(&ds, &[0], &c).unwrap();
        let mean = pooled_mean(&ds, &[0]).unwrap();
        let mut rng = RngStream::new(3).fork(1);
        let init = SaeParams::<f64>::init(4, 2, &mean, c.encoder_init_norm, c.theta_init, c.activation, &mut rng).unwrap();
        assert_eq!(sae, init);
        assert_eq!(log.steps(), 0);
    }

    #[test]
    fn initial_loss_is_spread_around_mean() {
        let ds = toy_dataset();
        let c = SaeTrainConfig {
            total_tokens: 32 * 40,
            batch_size: 32,
            expansion: 2,
            checkpoint_every_tokens: 0,
            ..Default::default()
        };
        let (_, log) = train_sae::<f64>(&ds, &[0], &c).unwrap();
        let first = log.records[0];
        assert_eq!(first.lambda, 0.0);
        // Reproduce the first batch and evaluate mean ||x - b_d||^2 directly.
        let root = RngStream::new(c.seed);
        let mut sampler = BatchSampler::new(&[0], 32, root.fork(2)).unwrap();
        let batch = sampler.sample_batch(&ds).unwrap();
        let mean = pooled_mean(&ds, &[0]).unwrap();
        let expect: f64 = (0..32)
            .map(|r| {
                batch
                    .row(r)
                    .iter()
                    .zip(&mean)
                    .map(|(&x, &m)| (x as f64 - (m as f32) as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 32.0;
        assert!((first.recon - expect).abs() < 1e-9, "{} vs {expect}", first.recon);
    }

    #[test]
    fn checkpoints_follow_token_budget() {
        let ds = toy_dataset();
        let c = SaeTrainConfig {
            total_tokens: 80,
            batch_size: 8,
            expansion: 1,
            checkpoint_every_tokens: 24,
            lr: 1e-3,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let (_, log) = train_sae_with::<f32, _>(&ds, &[0], &c, |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![3, 6, 9]);
        assert_eq!(log.checkpoints, seen);
        assert!(log.to_csv().starts_with("step,recon,l1,l0,lr_t,lambda_t\n0,"));
    }

    #[test]
    fn empty_group_rejected() {
        let ds = toy_dataset();
        assert!(matches!(
            train_sae::<f32>(&ds, &[], &SaeTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
