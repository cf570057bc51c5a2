//! JumpReLU sparse autoencoder: parameters, forward pass, loss, analytic
//! gradients and the training loop shared by per-layer and group models.

mod checkpoint;
mod grads;
mod train;

pub use checkpoint::{read_sae, write_sae, SaeCheckpointHeader, SAE_HEADER_LEN, SAE_MAGIC};
pub use grads::{renormalize_decoder, sae_grads, sae_grads_with, SaeGrads};
pub use train::{
    schedule_at, train_sae, train_sae_with, StepRecord, SaeTrainConfig, TrainLog,
};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, RngStream};
use crate::scalar::Scalar;

/// Gate function applied to encoder pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `z` where `z > theta`, else 0.
    #[default]
    HeavisideJumpRelu,
    /// `z * max(0, z - theta)`.
    ProductJumpRelu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::HeavisideJumpRelu => 0,
            Activation::ProductJumpRelu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::HeavisideJumpRelu),
            1 => Some(Activation::ProductJumpRelu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::HeavisideJumpRelu => "heaviside-jumprelu",
            Activation::ProductJumpRelu => "product-jumprelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heaviside-jumprelu" | "heaviside" => Some(Activation::HeavisideJumpRelu),
            "product-jumprelu" => Some(Activation::ProductJumpRelu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, z: T, theta: T) -> T {
        match self {
            Activation::HeavisideJumpRelu => {
                if z > theta {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::ProductJumpRelu => z * (z - theta).max(T::zero()),
        }
    }
}

/// Elementwise JumpReLU.
pub fn jumprelu<T: Scalar>(z: &[T], theta: &[T], mode: Activation) -> Vec<T> {
    z.iter().zip(theta).map(|(&z, &t)| mode.apply(z, t)).collect()
}

/// Encoder/decoder weights and thresholds.
///
/// The decoder is stored feature-major: row `j` of `dec` is column `j` of
/// `W_d`, so feature directions are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    w_enc: Matrix<T>,
    b_enc: Vec<T>,
    dec: Matrix<T>,
    b_dec: Vec<T>,
    theta: Vec<T>,
    activation: Activation,
}

impl<T: Scalar> SaeParams<T> {
    /// `w_dec` is `d x d_sae`, as in `x_hat = W_d f + b_d`.
    pub fn from_parts(
        w_enc: Matrix<T>,
        b_enc: Vec<T>,
        w_dec: &Matrix<T>,
        b_dec: Vec<T>,
        theta: Vec<T>,
        activation: Activation,
    ) -> Result<Self> {
        Self::from_feature_major(w_enc, b_enc, w_dec.transpose(), b_dec, theta, activation)
    }

    pub(crate) fn from_feature_major(
        w_enc: Matrix<T>,
        b_enc: Vec<T>,
        dec: Matrix<T>,
        b_dec: Vec<T>,
        theta: Vec<T>,
        activation: Activation,
    ) -> Result<Self> {
        let (d_sae, d) = w_enc.shape();
        if d == 0 || d_sae == 0 {
            return Err(Error::Shape("SAE dimensions must be positive".into()));
        }
        if dec.shape() != (d_sae, d) || b_enc.len() != d_sae || b_dec.len() != d || theta.len() != d_sae {
            return Err(Error::Shape(format!(
                "inconsistent SAE blocks for d={d}, d_sae={d_sae}"
            )));
        }
        if d_sae % d != 0 {
            return Err(Error::Shape(format!("d_sae={d_sae} is not a multiple of d={d}")));
        }
        let finite = w_enc.is_finite()
            && dec.is_finite()
            && b_enc.iter().chain(&b_dec).chain(&theta).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite SAE parameter".into()));
        }
        if theta.iter().any(|&t| t < T::zero()) {
            return Err(Error::Config("JumpReLU thresholds must be non-negative".into()));
        }
        Ok(Self {
            w_enc,
            b_enc,
            dec,
            b_dec,
            theta,
            activation,
        })
    }

    /// Training initialization: zero decoder, small random encoder, zero
    /// encoder bias, constant thresholds and `b_dec` set to `mean`.
    pub fn init(
        d: usize,
        expansion: usize,
        mean: &[f64],
        encoder_init_norm: f64,
        theta_init: f64,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if d == 0 || expansion == 0 {
            return Err(Error::Config("d and expansion must be positive".into()));
        }
        if mean.len() != d {
            return Err(Error::Shape(format!("mean has length {}, expected {d}", mean.len())));
        }
        let d_sae = d * expansion;
        let std = encoder_init_norm / (d as f64).sqrt();
        let w_enc = Matrix::from_vec(d_sae, d, rng.normal_vec(d_sae * d, std));
        Self::from_feature_major(
            w_enc,
            vec![T::zero(); d_sae],
            Matrix::zeros(d_sae, d),
            mean.iter().map(|&m| T::lit(m)).collect(),
            vec![T::lit(theta_init); d_sae],
            activation,
        )
    }

    pub fn d(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn expansion(&self) -> usize {
        self.d_sae() / self.d()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn w_enc(&self) -> &Matrix<T> {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[T] {
        &self.b_enc
    }

    /// `W_d` as a `d x d_sae` matrix.
    pub fn w_dec(&self) -> Matrix<T> {
        self.dec.transpose()
    }

    /// Decoder direction of feature `j` (column `j` of `W_d`).
    pub fn decoder_column(&self, j: usize) -> &[T] {
        self.dec.row(j)
    }

    pub(crate) fn decoder_feature_major(&self) -> &Matrix<T> {
        &self.dec
    }

    pub fn b_dec(&self) -> &[T] {
        &self.b_dec
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<T>) -> Result<()> {
        if theta.len() != self.d_sae() || theta.iter().any(|&t| !(t >= T::zero())) {
            return Err(Error::Config("thresholds must be d_sae non-negative values".into()));
        }
        self.theta = theta;
        Ok(())
    }

    /// Mutable views of every block in checkpoint order:
    /// encoder weights, encoder bias, decoder (feature-major), decoder bias, thresholds.
    pub(crate) fn blocks_mut(&mut self) -> [(&'static str, &mut [T]); 5] {
        [
            ("w_enc", self.w_enc.as_mut_slice()),
            ("b_enc", &mut self.b_enc[..]),
            ("w_dec", self.dec.as_mut_slice()),
            ("b_dec", &mut self.b_dec[..]),
            ("theta", &mut self.theta[..]),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> SaeParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        SaeParams {
            w_enc: self.w_enc.cast(),
            b_enc: conv(&self.b_enc),
            dec: self.dec.cast(),
            b_dec: conv(&self.b_dec),
            theta: conv(&self.theta),
            activation: self.activation,
        }
    }

    fn check_width(&self, m: &Matrix<T>, want: usize, what: &str) -> Result<()> {
        if m.cols() != want {
            return Err(Error::Shape(format!(
                "{what} has width {}, SAE expects {want}",
                m.cols()
            )));
        }
        Ok(())
    }

    /// `W_e^T` as a `d x d_sae` matrix, for row-wise encoding.
    pub(crate) fn encoder_transposed(&self) -> Matrix<T> {
        self.w_enc.transpose()
    }

    /// Pre-activations `W_e (x - b_d) + b_e` of one row into `out`.
    #[inline]
    pub(crate) fn preact_row(&self, w_enc_t: &Matrix<T>, x: &[T], xc: &mut [T], out: &mut [T]) {
        for ((c, &xi), &b) in xc.iter_mut().zip(x).zip(&self.b_dec) {
            *c = xi - b;
        }
        out.copy_from_slice(&self.b_enc);
        for (l, &c) in xc.iter().enumerate() {
            axpy(c, w_enc_t.row(l), out);
        }
    }

    pub fn preactivations(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_width(x, self.d(), "input")?;
        let wt = self.encoder_transposed();
        let mut out = Matrix::zeros(x.rows(), self.d_sae());
        let mut xc = vec![T::zero(); self.d()];
        for r in 0..x.rows() {
            self.preact_row(&wt, x.row(r), &mut xc, out.row_mut(r));
        }
        Ok(out)
    }

    /// Feature activations `f = sigma(W_e (x - b_d) + b_e)`.
    pub fn encode(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut f = self.preactivations(x)?;
        for r in 0..f.rows() {
            for (v, &t) in f.row_mut(r).iter_mut().zip(&self.theta) {
                *v = self.activation.apply(*v, t);
            }
        }
        Ok(f)
    }

    /// Reconstruction of one feature row into `out`. Zero features are skipped.
    #[inline]
    pub(crate) fn decode_row(&self, f: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.b_dec);
        for (j, &v) in f.iter().enumerate() {
            if v != T::zero() {
                axpy(v, self.dec.row(j), out);
            }
        }
    }

    /// `x_hat = W_d f + b_d`.
    pub fn decode(&self, f: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_width(f, self.d_sae(), "feature matrix")?;
        let mut out = Matrix::zeros(f.rows(), self.d());
        for r in 0..f.rows() {
            self.decode_row(f.row(r), out.row_mut(r));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.decode(&self.encode(x)?)
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
}

/// `mean ||x - x_hat||^2 + lambda * mean ||f||_1`.
pub fn sae_loss<T: Scalar>(sae: &SaeParams<T>, x: &Matrix<T>, lambda: f64) -> Result<LossTerms> {
    let f = sae.encode(x)?;
    let xh = sae.decode(&f)?;
    let n = x.rows().max(1) as f64;
    let mut recon = 0.0;
    let mut l1 = 0.0;
    for r in 0..x.rows() {
        recon += x
            .row(r)
            .iter()
            .zip(xh.row(r))
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum::<f64>();
        l1 += f.row(r).iter().map(|v| v.abs().as_f64()).sum::<f64>();
    }
    let (recon, l1) = (recon / n, l1 / n);
    Ok(LossTerms {
        total: recon + lambda * l1,
        recon,
        l1,
    })
}

/// A `c = 2` autoencoder with `W_e = [I; -I]`, `W_d = [I, -I]`, zero biases
/// and zero thresholds. Reconstructs every input exactly.
pub fn identity_sae<T: Scalar>(d: usize) -> SaeParams<T> {
    let mut w_enc = Matrix::zeros(2 * d, d);
    let mut dec = Matrix::zeros(2 * d, d);
    for i in 0..d {
        w_enc.set(i, i, T::one());
        w_enc.set(d + i, i, -T::one());
        dec.set(i, i, T::one());
        dec.set(d + i, i, -T::one());
    }
    SaeParams::from_feature_major(
        w_enc,
        vec![T::zero(); 2 * d],
        dec,
        vec![T::zero(); d],
        vec![T::zero(); 2 * d],
        Activation::HeavisideJumpRelu,
    )
    .expect("identity SAE is well formed")
}
