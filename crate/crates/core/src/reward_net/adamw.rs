use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &impl ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.shapes().into_iter().map(|n| vec![0.0; n]).collect();
        AdamWState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected AdamW update. Parameters are untouched when any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut impl ParamSet, grads: &Gradients) -> Result<()> {
        let names = params.tensor_names();
        let shapes = params.shapes();
        if grads.tensors.len() != shapes.len() || self.first_moment.len() != shapes.len() {
            return Err(Error::invalid("gradient/optimizer layout does not match parameters"));
        }
        for ((name, &n), (g, m)) in names
            .iter()
            .zip(&shapes)
            .zip(grads.tensors.iter().zip(&self.first_moment))
        {
            if g.len() != n || m.len() != n {
                return Err(Error::invalid(format!("shape mismatch for {name}")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Vec<f64>);

    impl ParamSet for Scalar {
        fn tensor_names(&self) -> Vec<String> {
            vec!["p".into()]
        }
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    fn grads(g: f64) -> Gradients {
        Gradients {
            tensors: vec![vec![g]],
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = Scalar(vec![0.7]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut st = AdamWState::new(cfg, &p);
        for _ in 0..5 {
            st.step(&mut p, &grads(0.0)).unwrap();
        }
        assert_eq!(p.0[0], 0.7);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Scalar(vec![1.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &grads(1.0)).unwrap();
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.0[0] - expected).abs() < 1e-15);
        assert!((p.0[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let mut p = Scalar(vec![1.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &grads(1.0)).unwrap();
        st.step(&mut p, &grads(-2.0)).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = (1.0 - 0.1 / (1.0 + 1e-8)) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.0[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = Scalar(vec![2.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &grads(0.0)).unwrap();
        assert!((p.0[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = Scalar(vec![1.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        match st.step(&mut p, &grads(f64::NAN)) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains('p')),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.0[0], 1.0);
        assert_eq!(st.step_count, 0);
    }
}
