use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(name: impl Into<String>, len: usize, config: AdamConfig) -> Self {
        Self {
            name: name.into(),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            config,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam block {}: state {}, params {}, grads {}",
                self.name,
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in block {} at index {i}",
                self.name
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = T::lit(1.0 - beta1.powi(t));
        let bc2 = T::lit(1.0 - beta2.powi(t));
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Applies one Adam step to a matrix-shaped parameter block.
pub fn adam_step<T: Scalar>(
    params: &mut Matrix<T>,
    grads: &Matrix<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::Shape(format!(
            "adam block {}: params {:?} vs grads {:?}",
            state.name,
            params.shape(),
            grads.shape()
        )));
    }
    state.step(params.as_mut_slice(), grads.as_slice(), lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ZERO_MOMENTUM: AdamConfig = AdamConfig {
        beta1: 0.0,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new("w", 4, ZERO_MOMENTUM);
        // Warm the state with a nonzero step so v is nonzero.
        st.step(&mut [0.0; 4], &[1.0; 4], 0.1).unwrap();
        adam_step(&mut p, &Matrix::zeros(2, 2), &mut st, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn single_step_hand_value() {
        // t=1, beta1=0: m_hat = g = 1, v_hat = g^2 = 1, update = lr / (1 + eps).
        let mut p = [0.0f64];
        let mut st = AdamState::new("w", 1, ZERO_MOMENTUM);
        st.step(&mut p, &[1.0], 1e-2).unwrap();
        let expected = -1e-2 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert_eq!(st.first_moment(), &[1.0]);
    }

    #[test]
    fn moves_against_gradient_sign() {
        let mut p = [0.0f64, 0.0];
        let mut st = AdamState::new("w", 2, ZERO_MOMENTUM);
        st.step(&mut p, &[0.5, -3.0], 1e-2).unwrap();
        let first = p;
        st.step(&mut p, &[0.5, -3.0], 1e-2).unwrap();
        assert!(first[0] < 0.0 && p[0] < first[0]);
        assert!(first[1] > 0.0 && p[1] > first[1]);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut st = AdamState::new("decoder", 2, ZERO_MOMENTUM);
        let err = st.step(&mut [0.0f32; 2], &[0.0, f32::INFINITY], 1.0).unwrap_err();
        assert!(err.to_string().contains("decoder"));
    }
}
