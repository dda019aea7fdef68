use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{PivotError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding
    /// `weight_decay · θ` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            decoupled: false,
        }
    }
}

/// First and second moment estimates, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, config: &AdamConfig) -> Result<()> {
        self.step_where(params, grads, config, |_| true)
    }

    /// Updates only the blocks whose name satisfies `trainable`.
    pub fn step_where<P: ParamSet>(
        &mut self,
        params: &mut P,
        grads: &P,
        config: &AdamConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let gblocks = grads.blocks();
        for (name, g) in &gblocks {
            if trainable(name) && g.iter().any(|v| !v.is_finite()) {
                return Err(PivotError::NonFiniteGradient(name.clone()));
            }
        }
        let mut pblocks = params.blocks_mut();
        if pblocks.len() != gblocks.len() || pblocks.len() != self.m.len() {
            return Err(PivotError::Validation(format!(
                "optimizer state has {} blocks, parameters {}, gradients {}",
                self.m.len(),
                pblocks.len(),
                gblocks.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for (((name, theta), (_, g)), (m, v)) in pblocks
            .iter_mut()
            .zip(&gblocks)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !trainable(name) {
                continue;
            }
            for i in 0..theta.len() {
                let mut gi = g[i];
                if !config.decoupled {
                    gi += config.weight_decay * theta[i];
                }
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                if config.decoupled {
                    theta[i] -= config.lr * config.weight_decay * theta[i];
                }
                theta[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(Vec<f64>);

    impl ParamSet for Flat {
        fn blocks(&self) -> Vec<(String, &[f64])> {
            vec![("x".into(), &self.0)]
        }
        fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Flat(vec![1.0, -2.0]);
        let g = Flat(vec![3.0, -0.5]);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let expect0 = 1.0 - 1e-4 * 3.0 / (3.0 + 1e-8);
        let expect1 = -2.0 + 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((p.0[0] - expect0).abs() < 1e-15);
        assert!((p.0[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_enters_the_gradient() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = Flat(vec![2.0]);
        let g = Flat(vec![0.0]);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &cfg).unwrap();
        // effective gradient 1.0
        assert!((p.0[0] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);

        let dec = AdamConfig {
            decoupled: true,
            ..cfg
        };
        let mut p = Flat(vec![2.0]);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, &dec).unwrap();
        assert!((p.0[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let mut p = Flat(vec![1.0]);
        let g = Flat(vec![f64::NAN]);
        let mut s = AdamState::new(&p);
        let err = s.step(&mut p, &g, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, PivotError::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(p.0[0], 1.0);
        assert_eq!(s.step, 0);
    }
}
