//! Bias-corrected ADAM over a flat parameter vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Moments start at zero; `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One ADAM update of `params` in place. A non-finite gradient is rejected
/// before anything is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::arg(format!(
            "ADAM shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient {i} is {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = vec![1.0, -2.0];
        adam_step(&mut p, &[1.0, 1.0], &mut st).unwrap();
        let m1 = st.first_moment().to_vec();
        let before = p.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        // m stays nonzero so parameters still move; with zero moments they would not.
        assert!(st.first_moment().iter().zip(&m1).all(|(a, b)| a.abs() < b.abs()));
        let mut fresh = AdamState::new(2, 0.1);
        let mut q = before.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut fresh).unwrap();
        assert_eq!(q, before);
        assert_eq!(fresh.step(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.5, -3.0, 1e-3];
        let mut st = AdamState::new(3, 1e-3);
        let mut p = vec![0.0; 3];
        adam_step(&mut p, &g, &mut st).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
        }
    }

    #[test]
    fn two_constant_steps_match_hand_recurrence() {
        let (lr, g) = (0.01, 2.0);
        let mut st = AdamState::new(1, lr);
        let mut p = vec![1.0];
        adam_step(&mut p, &[g], &mut st).unwrap();
        adam_step(&mut p, &[g], &mut st).unwrap();
        // m2 = 0.1g·0.9 + 0.1g = 0.19g, v2 = 0.001g²·0.999 + 0.001g² = 0.001999g²
        let m_hat = 0.19 * g / (1.0 - 0.81);
        let v_hat = 0.001999 * g * g / (1.0 - 0.998001);
        let step2 = lr * m_hat / (v_hat.sqrt() + 1e-8);
        let step1 = lr * g / (g + 1e-8);
        assert!((p[0] - (1.0 - step1 - step2)).abs() < 1e-14);
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut st = AdamState::new(1, 0.1);
        let mut p = vec![1.0];
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut st), Err(Error::Numeric(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step(), 0);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut st).is_err());
    }
}
