//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for one network.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    name: String,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(name: impl Into<String>, params: &MlpParams, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            name: name.into(),
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. A non-finite gradient rejects the whole step
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &[Vec<f64>]) -> Result<()> {
        let names = params.names();
        if grads.len() != names.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                shapes: vec![vec![names.len()], vec![grads.len()]],
            });
        }
        for ((t, g), name) in params.tensors().zip(grads).zip(&names) {
            if t.len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    shapes: vec![t.shape().to_vec(), vec![g.len()]],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}.{name}", self.name)));
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = lr * weight_decay;

        for (((t, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= decay * *p + lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpConfig, OutputActivation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> MlpParams {
        let cfg = MlpConfig {
            in_dim: 3,
            hidden_dims: vec![4],
            out_dim: 2,
            output_activation: OutputActivation::Identity,
        };
        let mut p = MlpParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for b in p.biases.iter_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = 0.25);
        }
        p
    }

    fn grads_like(p: &MlpParams, f: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        p.tensors().map(|t| (0..t.len()).map(&f).collect()).collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = small();
        let before = p.flatten();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new("net", &p, cfg);
        let g = grads_like(&p, |i| if i % 2 == 0 { 0.37 } else { -12.0 });
        st.step(&mut p, &g).unwrap();
        for (a, b) in p.flatten().iter().zip(before) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-9);
        }
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = small();
        let before = p.clone();
        let mut st = AdamState::new(
            "net",
            &p,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        let g = grads_like(&p, |_| 0.0);
        for _ in 0..3 {
            st.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = small();
        let before = p.flatten();
        let mut st = AdamState::new("net", &p, AdamConfig::default());
        let g = grads_like(&p, |_| 0.0);
        st.step(&mut p, &g).unwrap();
        for (a, b) in p.flatten().iter().zip(before) {
            let want = b * (1.0 - 1e-7);
            assert!((a - want).abs() <= 1e-15 * b.abs().max(1.0), "{a} vs {want}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let mut p = small();
        let before = p.clone();
        let mut st = AdamState::new("phi", &p, AdamConfig::default());
        let mut g = grads_like(&p, |_| 1.0);
        g[2][1] = f64::NAN;
        match st.step(&mut p, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "phi.w1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 0);
    }
}
