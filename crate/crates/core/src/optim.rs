//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update at step `t` (1-based).
///
/// Weight decay shrinks the parameters by `1 − lr·weight_decay` before the
/// bias-corrected Adam step is applied.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    t: u64,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len() && params.len() == state.v.len(),
        Contract,
        "adam_step: {} params, {} grads, {} moments",
        params.len(),
        grads.len(),
        state.m.len()
    );
    ensure!(t >= 1, Contract, "adam step index starts at 1");
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let shrink = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let orig = p.clone();
        let mut s = AdamState::new(3);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0; 3], &mut s, 1e-3, 0.0, t).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut p = vec![0.0; 4];
        let g = [0.5, -3.0, 1e-3, -2e2];
        let mut s = AdamState::new(4);
        adam_step(&mut p, &g, &mut s, 0.01, 0.0, 1).unwrap();
        for (x, gi) in p.iter().zip(g) {
            assert!((x + 0.01 * gi.signum()).abs() < 1e-6, "{x} for grad {gi}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.1, 0.0, 1).is_err());
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut s, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(x) = Σ c_i (x_i − 1)²
        let c = [1.0, 4.0, 0.25];
        let f = |x: &[f64]| x.iter().zip(c).map(|(xi, ci)| ci * (xi - 1.0).powi(2)).sum::<f64>();
        let mut x = vec![-2.0, 3.0, 0.0];
        let mut s = AdamState::new(3);
        let mut losses = vec![f(&x)];
        for t in 1..=100 {
            let g: Vec<f64> = x.iter().zip(c).map(|(xi, ci)| 2.0 * ci * (xi - 1.0)).collect();
            adam_step(&mut x, &g, &mut s, 0.01, 0.0, t).unwrap();
            losses.push(f(&x));
        }
        assert!(losses[10..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn decay_shrinks_before_update() {
        let mut p = vec![2.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, 0.1, 0.5, 1).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }
}
