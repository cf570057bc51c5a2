//! Row-major kernels shared by the forward and backward passes.

use crate::numerics::{axpy, dot, Matrix};
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm output together with what its backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub out: Matrix<T>,
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &Matrix<T>, g: &[T], b: &[T]) -> LnCache<T> {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        rstd[r] = s;
        let xh = xhat.row_mut(r);
        for i in 0..d {
            xh[i] = (row[i] - mean) * s;
        }
        let o = out.row_mut(r);
        for i in 0..d {
            o[i] = xhat.get(r, i) * g[i] + b[i];
        }
    }
    LnCache { out, xhat, rstd }
}

/// Returns `dL/dx`; accumulates gain and bias gradients when given.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    g: &[T],
    grads: Option<(&mut [T], &mut [T])>,
) -> Matrix<T> {
    let (n, d) = dy.shape();
    if let Some((dg, db)) = grads {
        for r in 0..n {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
            }
        }
    }
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let mut dxh = vec![T::zero(); d];
    for r in 0..n {
        let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
        for i in 0..d {
            dxh[i] = dyr[i] * g[i];
        }
        let mean_dxh = dxh.iter().copied().sum::<T>() * inv_d;
        let mean_dxh_xh = dot(&dxh, xh) * inv_d;
        let s = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] = s * (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}

/// `x W + b` for `W` stored `in x out`.
pub(crate) fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let (n, out_dim) = (x.rows(), w.cols());
    let mut y = Matrix::zeros(n, out_dim);
    for r in 0..n {
        let yr = y.row_mut(r);
        yr.copy_from_slice(b);
        for (l, &a) in x.row(r).iter().enumerate() {
            if a != T::zero() {
                axpy(a, w.row(l), yr);
            }
        }
    }
    y
}

/// Returns `dL/dx = dy W^T`; accumulates `x^T dy` and column sums of `dy`
/// into the weight and bias gradients when given.
pub(crate) fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    grads: Option<(&mut Matrix<T>, &mut [T])>,
) -> Matrix<T> {
    let n = x.rows();
    if let Some((dw, db)) = grads {
        for r in 0..n {
            let dyr = dy.row(r);
            for (l, &a) in x.row(r).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, dyr, dw.row_mut(l));
                }
            }
            for (b, &v) in db.iter_mut().zip(dyr) {
                *b += v;
            }
        }
    }
    let mut dx = Matrix::zeros(n, w.rows());
    for r in 0..n {
        let dyr = dy.row(r);
        let out = dx.row_mut(r);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(dyr, w.row(i));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let x2 = x * x;
    let u = c * (x + T::lit(0.044715) * x2 * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x2);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// In-place softmax of a slice, computed in `T` with max subtraction.
pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expect = 0.5 * (1.0 + (GELU_C * 1.044715f64).tanh());
        assert!((gelu(1.0f64) - expect).abs() < 1e-15);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = finite_diff_grad(|v| gelu(v[0]), &[x], 1e-6).unwrap()[0];
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 6.0]]).unwrap();
        let c = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        let row = c.out.row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // var(x) = 3.5, so the normalized variance is 3.5 / (3.5 + eps).
        assert!((var - 3.5 / (3.5 + LN_EPS)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x0 = vec![0.3, -1.2, 2.0, 0.7, 0.1];
        let g = vec![1.5, -0.5, 0.8, 1.1, 0.9];
        let b = vec![0.1, 0.0, -0.2, 0.3, 0.0];
        let w = vec![0.2, 1.0, -0.4, 0.5, 0.3];
        let loss = |x: &[f64]| {
            let m = Matrix::from_vec(1, 5, x.to_vec());
            let c = layer_norm(&m, &g, &b);
            dot(c.out.row(0), &w)
        };
        let fd = finite_diff_grad(loss, &x0, 1e-6).unwrap();
        let m = Matrix::from_vec(1, 5, x0.clone());
        let c = layer_norm(&m, &g, &b);
        let dy = Matrix::from_vec(1, 5, w.clone());
        let dx = layer_norm_backward(&dy, &c, &g, None);
        for i in 0..5 {
            assert!((dx.get(0, i) - fd[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_round_trip_shapes() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let y = linear(&x, &w, &[0.5, 0.0, 0.0]);
        assert_eq!(y.row(0), &[1.5, 2.0, 4.0]);
        let mut dw = Matrix::zeros(2, 3);
        let mut db = vec![0.0; 3];
        let dy = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let dx = linear_backward(&x, &w, &dy, Some((&mut dw, &mut db)));
        assert_eq!(dx.row(0), &[3.0, 2.0]);
        assert_eq!(dw.row(1), &[2.0, 2.0, 2.0]);
        assert_eq!(db, vec![1.0; 3]);
    }
}
