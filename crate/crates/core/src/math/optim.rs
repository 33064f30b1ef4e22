//! Flat-parameter SGD and Adam update rules.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// theta - alpha * g, elementwise.
pub fn sgd_step(params: &[f64], gradient: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if params.len() != gradient.len() {
        return Err(Error::Shape(format!(
            "sgd: {} params vs {} gradient entries",
            params.len(),
            gradient.len()
        )));
    }
    if alpha < 0.0 {
        return Err(Error::Argument("negative learning rate".into()));
    }
    Ok(params
        .iter()
        .zip(gradient.iter())
        .map(|(&p, &g)| p - alpha * g)
        .collect())
}

/// Adam accumulator state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> AdamState {
        AdamState {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || gradient.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: state dim {} vs params {} / gradient {}",
                self.first_moment.len(),
                params.len(),
                gradient.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = gradient[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / b1t;
            let v_hat = self.second_moment[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        assert_eq!(sgd_step(&[1.0], &[0.5], 0.1).unwrap(), vec![0.95]);
        assert_eq!(
            sgd_step(&[2.0, -1.0], &[1.0, 1.0], 0.5).unwrap(),
            vec![1.5, -1.5]
        );
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let p = vec![0.3, -7.0, 2.5];
        assert_eq!(sgd_step(&p, &[0.0, 0.0, 0.0], 0.1).unwrap(), p);
    }

    #[test]
    fn sgd_zero_alpha_is_identity() {
        let p = vec![0.3, -7.0];
        assert_eq!(sgd_step(&p, &[5.0, -2.0], 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_shape_mismatch() {
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With g = 1: m_hat = 1, v_hat = 1, so |delta| = lr / (1 + eps).
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0], 1e-3).unwrap();
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((p[0] + expected).abs() < 1e-15, "got {}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.5, -2.0];
        for _ in 0..5 {
            st.step(&mut p, &[0.0, 0.0], 1e-2).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_steps_shrink() {
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        st.step(&mut p, &[2.0], 1e-3).unwrap();
        let d1 = p[0].abs();
        let before = p[0];
        st.step(&mut p, &[2.0], 1e-3).unwrap();
        let d2 = (p[0] - before).abs();
        assert!(d2 <= d1 + 1e-9, "d1 = {d1}, d2 = {d2}");
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0];
        assert!(st.step(&mut p, &[1.0], 1e-3).is_err());
    }
}
