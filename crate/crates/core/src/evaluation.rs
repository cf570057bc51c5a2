//! Reconstruction quality, sparsity and dictionary similarity metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activation_store::ActivationDataset;
use crate::desk_model::{forward, forward_spliced, nll, DeskParams, SpliceSpec};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::sae::SaeParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub sae_id: String,
    pub layer: usize,
    pub n_examples: usize,
    pub cels: f64,
    pub r2: f64,
    pub l2: f64,
    pub l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcsReport {
    pub sae_a: String,
    pub sae_b: String,
    pub mmcs: f64,
}

/// Mean next-token cross-entropy over `sequences`, optionally with a splice.
pub fn sequences_ce<T: Scalar>(
    model: &DeskParams<T>,
    sequences: &[Vec<u32>],
    splice: Option<&SpliceSpec<T>>,
    sae: Option<&SaeParams<T>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let logits = match splice {
            Some(spec) => forward_spliced(model, seq, spec, sae)?.logits,
            None => forward(model, seq)?.0,
        };
        for p in 0..seq.len() - 1 {
            total += nll(logits.row(p), seq[p + 1] as usize);
        }
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(Error::Data("no next-token targets to score".into()));
    }
    Ok(total / count as f64)
}

/// `(CE(zero) - CE(recon)) / (CE(zero) - CE(clean))`.
pub fn cels_from_runs(ce_clean: f64, ce_zero: f64, ce_recon: f64) -> Result<f64> {
    let denom = ce_zero - ce_clean;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(
            "zero-ablated and clean cross-entropy coincide".into(),
        ));
    }
    Ok((ce_zero - ce_recon) / denom)
}

/// CE loss score of splicing `sae`'s reconstruction into `layer` alone,
/// with zero ablation of the same layer as the floor.
pub fn ce_loss_score<T: Scalar>(
    model: &DeskParams<T>,
    sequences: &[Vec<u32>],
    sae: &SaeParams<T>,
    layer: usize,
) -> Result<f64> {
    let clean = sequences_ce(model, sequences, None, None)?;
    let zero = sequences_ce(model, sequences, Some(&SpliceSpec::zero_ablation(&[layer])), None)?;
    let recon = sequences_ce(model, sequences, Some(&SpliceSpec::reconstruction(&[layer])), Some(sae))?;
    cels_from_runs(clean, zero, recon)
}

/// `1 - ||x - x_hat||^2 / ||x - mu||^2`, summed over rows and dimensions.
pub fn r_squared<T: Scalar>(x: &Matrix<T>, x_hat: &Matrix<T>, mu: &[f64]) -> Result<f64> {
    if x.shape() != x_hat.shape() || mu.len() != x.cols() {
        return Err(Error::Shape(format!(
            "r_squared of {:?} vs {:?} with mean of length {}",
            x.shape(),
            x_hat.shape(),
            mu.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..x.rows() {
        for ((&a, &b), &m) in x.row(r).iter().zip(x_hat.row(r)).zip(mu) {
            let (a, b) = (a.as_f64(), b.as_f64());
            num += (a - b) * (a - b);
            den += (a - m) * (a - m);
        }
    }
    if den == 0.0 {
        return Err(Error::Numeric("data has zero variance about the mean".into()));
    }
    Ok(1.0 - num / den)
}

/// Mean over rows of the number of exactly nonzero features.
pub fn l0_sparsity<T: Scalar>(f: &Matrix<T>) -> f64 {
    if f.rows() == 0 {
        return 0.0;
    }
    let nnz = f.as_slice().iter().filter(|&&v| v != T::zero()).count();
    nnz as f64 / f.rows() as f64
}

/// Mean over rows of `||x - x_hat||^2`.
pub fn l2_loss<T: Scalar>(x: &Matrix<T>, x_hat: &Matrix<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape("l2 of mismatched batches".into()));
    }
    let s: f64 = x
        .as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / x.rows().max(1) as f64)
}

fn unit_columns<T: Scalar>(sae: &SaeParams<T>, which: &str) -> Result<Vec<Vec<f64>>> {
    (0..sae.d_sae())
        .map(|j| {
            let c: Vec<f64> = sae.decoder_column(j).iter().map(|v| v.as_f64()).collect();
            let n = dot(&c, &c).sqrt();
            if n == 0.0 {
                return Err(Error::Numeric(format!("decoder column {j} of {which} is zero")));
            }
            Ok(c.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Mean over decoder columns of `a` of the best cosine similarity with any
/// decoder column of `b`.
pub fn mmcs<T: Scalar>(a: &SaeParams<T>, b: &SaeParams<T>) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::Shape(format!("mmcs between d={} and d={}", a.d(), b.d())));
    }
    let ua = unit_columns(a, "a")?;
    let ub = unit_columns(b, "b")?;
    let total: f64 = ua
        .iter()
        .map(|u| ub.iter().map(|v| dot(u, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok((total / ua.len() as f64).clamp(-1.0, 1.0))
}

/// Held-out inputs shared by every `evaluate_sae` call: token sequences for
/// the CE runs, activation rows per layer, training-set layer means, and the
/// clean and per-layer zero-ablated cross-entropies.
pub struct EvalContext<'a, T> {
    pub model: &'a DeskParams<T>,
    pub sequences: &'a [Vec<u32>],
    pub heldout: &'a ActivationDataset,
    pub train_means: &'a BTreeMap<usize, Vec<f64>>,
    ce_clean: f64,
    ce_zero: BTreeMap<usize, f64>,
}

impl<'a, T: Scalar> EvalContext<'a, T> {
    pub fn new(
        model: &'a DeskParams<T>,
        sequences: &'a [Vec<u32>],
        heldout: &'a ActivationDataset,
        train_means: &'a BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        let ce_clean = sequences_ce(model, sequences, None, None)?;
        let mut ce_zero = BTreeMap::new();
        for &l in train_means.keys() {
            ce_zero.insert(l, sequences_ce(model, sequences, Some(&SpliceSpec::zero_ablation(&[l])), None)?);
        }
        Ok(Self {
            model,
            sequences,
            heldout,
            train_means,
            ce_clean,
            ce_zero,
        })
    }

    pub fn ce_clean(&self) -> f64 {
        self.ce_clean
    }

    pub fn ce_zero(&self, layer: usize) -> Option<f64> {
        self.ce_zero.get(&layer).copied()
    }
}

/// One report per layer in `layers`, each over the first `n_examples`
/// held-out rows of that layer.
pub fn evaluate_sae<T: Scalar>(
    ctx: &EvalContext<'_, T>,
    sae_id: &str,
    sae: &SaeParams<T>,
    layers: &[usize],
    n_examples: usize,
) -> Result<Vec<ReconReport>> {
    if n_examples == 0 {
        return Err(Error::Config("n_examples must be positive".into()));
    }
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let rows = ctx.heldout.layer(layer)?;
        if rows.rows() < n_examples {
            return Err(Error::Data(format!(
                "layer {layer} has {} held-out rows, {n_examples} requested",
                rows.rows()
            )));
        }
        let mu = ctx
            .train_means
            .get(&layer)
            .ok_or_else(|| Error::Data(format!("no training mean for layer {layer}")))?;
        let x: Matrix<T> = Matrix::from_vec(
            n_examples,
            rows.cols(),
            rows.as_slice()[..n_examples * rows.cols()]
                .iter()
                .map(|&v| T::lit(v as f64))
                .collect(),
        );
        let f = sae.encode(&x)?;
        let x_hat = sae.decode(&f)?;
        let ce_zero = ctx
            .ce_zero(layer)
            .ok_or_else(|| Error::Data(format!("no zero-ablation run for layer {layer}")))?;
        let ce_recon = sequences_ce(ctx.model, ctx.sequences, Some(&SpliceSpec::reconstruction(&[layer])), Some(sae))?;
        out.push(ReconReport {
            sae_id: sae_id.to_string(),
            layer,
            n_examples,
            cels: cels_from_runs(ctx.ce_clean, ce_zero, ce_recon)?,
            r2: r_squared(&x, &x_hat, mu)?,
            l2: l2_loss(&x, &x_hat)?,
            l0: l0_sparsity(&f),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{identity_sae, Activation};

    #[test]
    fn r_squared_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let mu = vec![2.0, 4.0];
        assert_eq!(r_squared(&x, &x, &mu).unwrap(), 1.0);
        let m = Matrix::from_rows(&[mu.clone(), mu.clone()]).unwrap();
        assert_eq!(r_squared(&x, &m, &mu).unwrap(), 0.0);
        let bad = x.scale(-1.0);
        assert!(r_squared(&x, &bad, &mu).unwrap() < 0.0);
        let flat = Matrix::from_rows(&[mu.clone(), mu.clone()]).unwrap();
        assert!(matches!(r_squared(&flat, &flat, &mu), Err(Error::Numeric(_))));
    }

    #[test]
    fn l0_examples() {
        let f = Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![2.0, 0.5, 0.0, 3.0]]).unwrap();
        assert_eq!(l0_sparsity(&f), 2.0);
        assert_eq!(l0_sparsity(&Matrix::<f64>::zeros(3, 4)), 0.0);
        assert_eq!(l0_sparsity(&Matrix::from_rows(&[vec![1.0; 4]]).unwrap()), 4.0);
        assert_eq!(l0_sparsity(&f.scale(7.5)), 2.0);
    }

    fn two_feature_sae(cols: [[f64; 2]; 2]) -> SaeParams<f64> {
        let w_dec = Matrix::from_rows(&[vec![cols[0][0], cols[1][0]], vec![cols[0][1], cols[1][1]]]).unwrap();
        SaeParams::from_parts(
            Matrix::zeros(2, 2),
            vec![0.0; 2],
            &w_dec,
            vec![0.0; 2],
            vec![0.0; 2],
            Activation::HeavisideJumpRelu,
        )
        .unwrap()
    }

    #[test]
    fn mmcs_examples() {
        let a = identity_sae::<f64>(3);
        assert!((mmcs(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let x = two_feature_sae([[1.0, 0.0], [1.0, 0.0]]);
        let y = two_feature_sae([[0.0, 1.0], [0.0, -2.0]]);
        assert_eq!(mmcs(&x, &y).unwrap(), 0.0);

        // Columns of a at 0 and 90 degrees; b at 30 and 120 degrees.
        // Best matches: cos 30 for the first, cos 30 for the second.
        let deg = |t: f64| [t.to_radians().cos(), t.to_radians().sin()];
        let a = two_feature_sae([deg(0.0), deg(90.0)]);
        let b = two_feature_sae([deg(30.0), deg(120.0)]);
        let expect = (30f64.to_radians().cos() + 30f64.to_radians().cos()) / 2.0;
        assert!((mmcs(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mmcs_rejects_mismatch_and_zero_columns() {
        assert!(matches!(
            mmcs(&identity_sae::<f64>(2), &identity_sae::<f64>(3)),
            Err(Error::Shape(_))
        ));
        let z = two_feature_sae([[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(mmcs(&z, &identity_sae::<f64>(2)), Err(Error::Numeric(_))));
    }

    #[test]
    fn cels_runs() {
        assert_eq!(cels_from_runs(2.0, 5.0, 2.0).unwrap(), 1.0);
        assert_eq!(cels_from_runs(2.0, 5.0, 5.0).unwrap(), 0.0);
        assert!((cels_from_runs(2.0, 5.0, 3.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(cels_from_runs(2.0, 2.0, 3.0), Err(Error::Numeric(_))));
    }
}
