use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_away_from_zero() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v.abs()).sum(), &[2.0, -3.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form() {
        let a = [[2.0, -1.0, 0.5], [0.3, 1.0, 4.0], [-2.0, 0.0, 3.0]];
        let x = [0.7, -1.2, 2.5];
        let quad = |v: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += v[i] * a[i][j] * v[j];
                }
            }
            s
        };
        let g = finite_diff_grad(quad, &x, 1e-5).unwrap();
        for i in 0..3 {
            let exact: f64 = (0..3).map(|j| (a[i][j] + a[j][i]) * x[j]).sum();
            assert!((g[i] - exact).abs() <= 1e-5 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn nan_objective() {
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
