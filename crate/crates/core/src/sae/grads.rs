use rayon::prelude::*;

use super::{Activation, SaeParams};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, ExecMode, Matrix};
use crate::scalar::Scalar;

/// Rows per work unit when splitting a batch across threads. Fixed so the
/// deterministic reduction order does not depend on the thread count.
const ROWS_PER_CHUNK: usize = 256;

/// Loss gradients, laid out like [`SaeParams`] (decoder feature-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads<T> {
    pub w_enc: Matrix<T>,
    pub b_enc: Vec<T>,
    pub(crate) dec: Matrix<T>,
    pub b_dec: Vec<T>,
    pub theta: Vec<T>,
}

/// Batch statistics gathered during the gradient pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub recon: f64,
    pub l1: f64,
    pub l0: f64,
}

impl<T: Scalar> SaeGrads<T> {
    pub fn zeros(d: usize, d_sae: usize) -> Self {
        Self {
            w_enc: Matrix::zeros(d_sae, d),
            b_enc: vec![T::zero(); d_sae],
            dec: Matrix::zeros(d_sae, d),
            b_dec: vec![T::zero(); d],
            theta: vec![T::zero(); d_sae],
        }
    }

    /// Decoder gradient as a `d x d_sae` matrix.
    pub fn w_dec(&self) -> Matrix<T> {
        self.dec.transpose()
    }

    pub fn decoder_column(&self, j: usize) -> &[T] {
        self.dec.row(j)
    }

    pub(crate) fn blocks(&self) -> [&[T]; 5] {
        [
            self.w_enc.as_slice(),
            &self.b_enc,
            self.dec.as_slice(),
            &self.b_dec,
            &self.theta,
        ]
    }

    fn add_assign(&mut self, other: &Self) {
        let pairs = [
            (self.w_enc.as_mut_slice(), other.w_enc.as_slice()),
            (&mut self.b_enc[..], &other.b_enc[..]),
            (self.dec.as_mut_slice(), other.dec.as_slice()),
            (&mut self.b_dec[..], &other.b_dec[..]),
            (&mut self.theta[..], &other.theta[..]),
        ];
        for (a, b) in pairs {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

struct Partial<T> {
    grads: SaeGrads<T>,
    stats: BatchStats,
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Accumulates gradient contributions of `rows` into `out`.
///
/// Heaviside mode uses the straight-through rule: `df/dz = 1` on open gates
/// and a rectangular pseudo-derivative `-(theta/eps) * 1[|z - theta| < eps/2]`
/// for `df/dtheta`.
#[allow(clippy::too_many_arguments)]
fn accumulate<T: Scalar>(
    sae: &SaeParams<T>,
    w_enc_t: &Matrix<T>,
    x: &Matrix<T>,
    rows: std::ops::Range<usize>,
    lambda: T,
    bandwidth: T,
    n_total: usize,
    out: &mut Partial<T>,
) {
    let (d, d_sae) = (sae.d(), sae.d_sae());
    let mut xc = vec![T::zero(); d];
    let mut z = vec![T::zero(); d_sae];
    let mut xhat = vec![T::zero(); d];
    let mut g = vec![T::zero(); d];
    let mut dxc = vec![T::zero(); d];
    let mut active: Vec<usize> = Vec::with_capacity(d_sae);
    let two_over_n = T::lit(2.0) / T::lit(n_total as f64);
    let l1_scale = lambda / T::lit(n_total as f64);
    let half_bw = bandwidth * T::lit(0.5);
    let theta = sae.theta();
    let dec = sae.decoder_feature_major();
    let act = sae.activation();
    let grads = &mut out.grads;

    for r in rows {
        let xr = x.row(r);
        sae.preact_row(w_enc_t, xr, &mut xc, &mut z);

        active.clear();
        xhat.copy_from_slice(sae.b_dec());
        let mut l1 = 0.0;
        for j in 0..d_sae {
            let f = act.apply(z[j], theta[j]);
            if f != T::zero() {
                active.push(j);
                axpy(f, dec.row(j), &mut xhat);
                l1 += f.abs().as_f64();
            }
        }
        let mut recon = 0.0;
        for i in 0..d {
            let e = xhat[i] - xr[i];
            recon += e.as_f64() * e.as_f64();
            g[i] = e * two_over_n;
        }
        out.stats.recon += recon;
        out.stats.l1 += l1;
        out.stats.l0 += active.len() as f64;

        dxc.iter_mut().for_each(|v| *v = T::zero());
        for &j in &active {
            let zj = z[j];
            let f = act.apply(zj, theta[j]);
            let r_j = dot(dec.row(j), &g) + l1_scale * sign(f);
            axpy(f, &g, grads.dec.row_mut(j));
            let dz = match act {
                Activation::HeavisideJumpRelu => r_j,
                Activation::ProductJumpRelu => {
                    grads.theta[j] -= r_j * zj;
                    r_j * ((zj - theta[j]) + zj)
                }
            };
            if dz != T::zero() {
                axpy(dz, &xc, grads.w_enc.row_mut(j));
                grads.b_enc[j] += dz;
                axpy(dz, sae.w_enc().row(j), &mut dxc);
            }
        }
        if act == Activation::HeavisideJumpRelu && bandwidth > T::zero() {
            for j in 0..d_sae {
                if (z[j] - theta[j]).abs() < half_bw {
                    let r_j = dot(dec.row(j), &g) + l1_scale * sign(z[j]);
                    grads.theta[j] -= r_j * theta[j] / bandwidth;
                }
            }
        }
        for i in 0..d {
            grads.b_dec[i] += g[i] - dxc[i];
        }
    }
}

/// Analytic gradients of the batch-mean loss, computed serially.
pub fn sae_grads<T: Scalar>(
    sae: &SaeParams<T>,
    x: &Matrix<T>,
    lambda: f64,
    bandwidth: f64,
) -> Result<SaeGrads<T>> {
    let (grads, _) = sae_grads_with(sae, x, lambda, bandwidth, None)?;
    Ok(grads)
}

/// Gradients plus batch statistics. With `Some(mode)` the batch is split into
/// fixed chunks processed in parallel; `None` runs serially.
pub fn sae_grads_with<T: Scalar>(
    sae: &SaeParams<T>,
    x: &Matrix<T>,
    lambda: f64,
    bandwidth: f64,
    mode: Option<ExecMode>,
) -> Result<(SaeGrads<T>, BatchStats)> {
    if x.cols() != sae.d() {
        return Err(Error::Shape(format!(
            "batch width {} vs SAE d = {}",
            x.cols(),
            sae.d()
        )));
    }
    let n = x.rows();
    let (d, d_sae) = (sae.d(), sae.d_sae());
    let w_enc_t = sae.encoder_transposed();
    let (lambda, bw) = (T::lit(lambda), T::lit(bandwidth));
    let fresh = || Partial {
        grads: SaeGrads::zeros(d, d_sae),
        stats: BatchStats::default(),
    };
    let run = |range: std::ops::Range<usize>| {
        let mut p = fresh();
        accumulate(sae, &w_enc_t, x, range, lambda, bw, n, &mut p);
        p
    };
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(ROWS_PER_CHUNK)
        .map(|s| s..(s + ROWS_PER_CHUNK).min(n))
        .collect();
    let total = match mode {
        None => run(0..n),
        Some(ExecMode::Deterministic) => {
            let parts: Vec<Partial<T>> = chunks.into_par_iter().map(run).collect();
            let mut acc = fresh();
            for p in &parts {
                acc.grads.add_assign(&p.grads);
                acc.stats.recon += p.stats.recon;
                acc.stats.l1 += p.stats.l1;
                acc.stats.l0 += p.stats.l0;
            }
            acc
        }
        Some(ExecMode::Parallel) => chunks
            .into_par_iter()
            .map(run)
            .reduce(fresh, |mut a, b| {
                a.grads.add_assign(&b.grads);
                a.stats.recon += b.stats.recon;
                a.stats.l1 += b.stats.l1;
                a.stats.l0 += b.stats.l0;
                a
            }),
    };
    if !total.grads.is_finite() {
        return Err(Error::Numeric("non-finite SAE gradient".into()));
    }
    let nf = n.max(1) as f64;
    let stats = BatchStats {
        recon: total.stats.recon / nf,
        l1: total.stats.l1 / nf,
        l0: total.stats.l0 / nf,
    };
    Ok((total.grads, stats))
}

/// Rescales every decoder column to unit norm and removes from each decoder
/// gradient column its component along that column.
pub fn renormalize_decoder<T: Scalar>(sae: &mut SaeParams<T>, grads: &mut SaeGrads<T>) -> Result<()> {
    for j in 0..sae.d_sae() {
        let col = sae.dec.row_mut(j);
        let norm = dot(col, col).sqrt();
        if norm == T::zero() {
            return Err(Error::Numeric(format!("decoder column {j} is zero")));
        }
        col.iter_mut().for_each(|v| *v /= norm);
        let g = grads.dec.row_mut(j);
        let along = dot(g, col);
        axpy(-along, col, g);
    }
    Ok(())
}

/// Projects decoder gradients orthogonal to their (nonzero) columns.
pub(crate) fn project_decoder_grads<T: Scalar>(sae: &SaeParams<T>, grads: &mut SaeGrads<T>) {
    for j in 0..sae.d_sae() {
        let col = sae.dec.row(j);
        let nn = dot(col, col);
        if nn == T::zero() {
            continue;
        }
        let g = grads.dec.row_mut(j);
        let along = dot(g, col) / nn;
        axpy(-along, col, g);
    }
}

/// Rescales nonzero decoder columns to unit norm; returns how many columns
/// are still exactly zero.
pub(crate) fn normalize_decoder_columns<T: Scalar>(sae: &mut SaeParams<T>) -> usize {
    let mut zero = 0;
    for j in 0..sae.d_sae() {
        let col = sae.dec.row_mut(j);
        let norm = dot(col, col).sqrt();
        if norm == T::zero() {
            zero += 1;
            continue;
        }
        col.iter_mut().for_each(|v| *v /= norm);
    }
    zero
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::sae::sae_loss;

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut rng = RngStream::new(1);
        let b = vec![0.3, -1.0, 2.0];
        let mut sae = SaeParams::<f64>::init(3, 2, &b, 1.0, 0.1, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        sae.w_enc = Matrix::zeros(6, 3);
        let x = Matrix::from_rows(&[b.clone(), b.clone()]).unwrap();
        let g = sae_grads(&sae, &x, 0.0, 0.001).unwrap();
        assert!(g.blocks().iter().all(|blk| blk.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unit_columns_unchanged() {
        let mut rng = RngStream::new(3);
        let mut sae = SaeParams::<f64>::init(4, 2, &[0.0; 4], 1.0, 0.0, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        sae.dec = Matrix::from_vec(8, 4, rng.normal_vec(32, 1.0));
        normalize_decoder_columns(&mut sae);
        let before = sae.dec.clone();
        let mut g = SaeGrads::zeros(4, 8);
        renormalize_decoder(&mut sae, &mut g).unwrap();
        assert!(sae.dec.max_abs_diff(&before) < 1e-12);
    }

    #[test]
    fn scaled_column_renormalized_and_parallel_grad_removed() {
        let mut rng = RngStream::new(5);
        let mut sae = SaeParams::<f64>::init(3, 1, &[0.0; 3], 1.0, 0.0, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        let dir = [0.6, 0.0, 0.8];
        for j in 0..3 {
            sae.dec.row_mut(j).copy_from_slice(&[0.6 * 5.0, 0.0, 0.8 * 5.0]);
        }
        let mut g = SaeGrads::zeros(3, 3);
        g.dec.row_mut(0).copy_from_slice(&[1.2, 0.0, 1.6]);
        g.dec.row_mut(1).copy_from_slice(&[0.0, 1.0, 0.0]);
        renormalize_decoder(&mut sae, &mut g).unwrap();
        for (a, b) in sae.decoder_column(0).iter().zip(dir) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.decoder_column(0).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(g.decoder_column(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_column_is_an_error() {
        let mut rng = RngStream::new(5);
        let mut sae = SaeParams::<f64>::init(3, 1, &[0.0; 3], 1.0, 0.0, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        let mut g = SaeGrads::zeros(3, 3);
        assert!(matches!(renormalize_decoder(&mut sae, &mut g), Err(Error::Numeric(_))));
    }

    #[test]
    fn parallel_modes_agree_with_serial() {
        let mut rng = RngStream::new(8);
        let mut sae = SaeParams::<f64>::init(6, 4, &[0.1; 6], 1.0, 0.01, Activation::HeavisideJumpRelu, &mut rng).unwrap();
        sae.dec = Matrix::from_vec(24, 6, rng.normal_vec(144, 0.4));
        let x = Matrix::from_vec(700, 6, rng.normal_vec(4200, 1.0));
        let (serial, s0) = sae_grads_with(&sae, &x, 0.5, 0.05, None).unwrap();
        let (det, s1) = sae_grads_with(&sae, &x, 0.5, 0.05, Some(ExecMode::Deterministic)).unwrap();
        let (par, _) = sae_grads_with(&sae, &x, 0.5, 0.05, Some(ExecMode::Parallel)).unwrap();
        for (a, b) in serial.blocks().iter().zip(det.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (a, b) in det.blocks().iter().zip(par.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!((s0.recon - s1.recon).abs() < 1e-9);
        let loss = sae_loss(&sae, &x, 0.5).unwrap();
        assert!((loss.recon - s0.recon).abs() < 1e-9 && (loss.l1 - s0.l1).abs() < 1e-9);
    }
}
