//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        AdamState { m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update over matching parameter and gradient blocks.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(ZslError::Dimension {
            op: "adam_step",
            left: (params.len(), 1),
            right: (grads.len(), state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(ZslError::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let ps = p.as_mut_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for (i, &gi) in g.as_slice().iter().enumerate() {
            ms[i] = config.beta1 * ms[i] + (1.0 - config.beta1) * gi;
            vs[i] = config.beta2 * vs[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = ms[i] / bias1;
            let v_hat = vs[i] / bias2;
            ps[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        if !p.all_finite() {
            return Err(ZslError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let g = Matrix::zeros(1, 2);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = scalar(0.0);
        let g = scalar(3.0);
        let mut state = AdamState::new([&p]);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
            step = p.get(0, 0) - last;
            last = p.get(0, 0);
            assert!(step < 0.0);
        }
        assert!((step.abs() - cfg.learning_rate).abs() < 1e-9);
    }

    #[test]
    fn matches_hand_recursion_on_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3), x0 = 0
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }
        // first step of Adam moves by ~lr regardless of gradient scale
        assert!((expected[0] - 0.1).abs() < 1e-6);

        let mut p = scalar(0.0);
        let mut state = AdamState::new([&p]);
        for want in expected {
            let g = scalar(2.0 * (p.get(0, 0) - 3.0));
            adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
            assert!((p.get(0, 0) - want).abs() < 1e-12);
        }
        assert_eq!(state.steps(), 3);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 2);
        let mut state = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).is_err());
    }
}
