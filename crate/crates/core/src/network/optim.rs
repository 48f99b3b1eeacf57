use serde::{Deserialize, Serialize};

use super::{NetworkSpec, ParamGrads, ParamKey};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum over gradients averaged across accumulated passes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: SgdConfig,
    keys: Vec<ParamKey>,
    velocity: Vec<Vec<f64>>,
    accumulated: Vec<Vec<f64>>,
    passes: usize,
}

impl OptState {
    pub fn new(net: &NetworkSpec, config: SgdConfig) -> Self {
        let mut keys = Vec::new();
        let mut zeros = Vec::new();
        net.visit_params(|k, v, _| {
            keys.push(k);
            zeros.push(vec![0.0; v.len()]);
        });
        OptState {
            config,
            keys,
            velocity: zeros.clone(),
            accumulated: zeros,
            passes: 0,
        }
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Mean of the gradients accumulated since the last step.
    pub fn mean_gradient(&self) -> Option<ParamGrads> {
        if self.passes == 0 {
            return None;
        }
        let inv = 1.0 / self.passes as f64;
        Some(ParamGrads {
            keys: self.keys.clone(),
            values: self
                .accumulated
                .iter()
                .map(|g| g.iter().map(|v| v * inv).collect())
                .collect(),
        })
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        if grads.keys != self.keys {
            return Err(Error::shape("gradient keys do not match optimizer parameters"));
        }
        for (acc, g) in self.accumulated.iter_mut().zip(&grads.values) {
            if acc.len() != g.len() {
                return Err(Error::shape("gradient length does not match optimizer buffer"));
            }
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.passes += 1;
        Ok(())
    }

    /// `v <- mu*v - lr*(g_mean + wd*theta)`, `theta <- theta + v`, then
    /// clears the accumulation buffers.
    pub fn sgd_step(&mut self, net: &mut NetworkSpec) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::invalid("sgd_step called with no accumulated gradients"));
        }
        if net.param_keys() != self.keys {
            return Err(Error::shape("network parameters do not match optimizer state"));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        let inv = 1.0 / self.passes as f64;
        let mut i = 0;
        let (velocity, accumulated) = (&mut self.velocity, &mut self.accumulated);
        net.visit_params_mut(|_, theta| {
            let v = &mut velocity[i];
            let acc = &mut accumulated[i];
            for ((t, vj), aj) in theta.iter_mut().zip(v.iter_mut()).zip(acc.iter_mut()) {
                let g = *aj * inv + weight_decay * *t;
                *vj = momentum * *vj - lr * g;
                *t += *vj;
                *aj = 0.0;
            }
            i += 1;
        });
        self.passes = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mini_fcrn, FcrnConfig};

    fn net() -> NetworkSpec {
        build_mini_fcrn(&FcrnConfig {
            stage_widths: vec![2],
            blocks_per_stage: vec![1],
            num_classes: 2,
            ..FcrnConfig::default()
        })
        .unwrap()
    }

    fn grads_like(net: &NetworkSpec, f: impl Fn(usize) -> f64) -> ParamGrads {
        let mut g = net.grads_from_shaped();
        let mut k = 0;
        for vals in &mut g.values {
            for v in vals {
                *v = f(k);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn plain_sgd_step() {
        let mut n = net();
        let before = n.flat_params();
        let g = grads_like(&n, |k| (k % 7) as f64 - 3.0);
        let mut opt = OptState::new(&n, SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        opt.accumulate(&g).unwrap();
        opt.sgd_step(&mut n).unwrap();
        let expect: Vec<f64> = before.iter().zip(g.flat()).map(|(t, g)| t - 0.1 * g).collect();
        assert_eq!(n.flat_params(), expect);
        assert_eq!(opt.passes(), 0);
    }

    #[test]
    fn repeated_accumulation_is_mean_normalized() {
        let g = grads_like(&net(), |k| (k as f64 * 0.37).sin());
        let cfg = SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-3 };
        let mut a = net();
        let mut oa = OptState::new(&a, cfg);
        oa.accumulate(&g).unwrap();
        oa.sgd_step(&mut a).unwrap();
        let mut b = net();
        let mut ob = OptState::new(&b, cfg);
        for _ in 0..4 {
            ob.accumulate(&g).unwrap();
        }
        ob.sgd_step(&mut b).unwrap();
        for (x, y) in a.flat_params().iter().zip(b.flat_params()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn momentum_two_steps_by_hand() {
        // theta0 = t, g constant: v1 = -lr*g, theta1 = t - lr*g;
        // v2 = mu*v1 - lr*g = -(1+mu)*lr*g, theta2 = t - (2+mu)*lr*g.
        let mut n = net();
        let t0 = n.flat_params();
        let g = grads_like(&n, |k| 1.0 + (k % 3) as f64);
        let (lr, mu) = (0.01, 0.9);
        let mut opt = OptState::new(&n, SgdConfig { lr, momentum: mu, weight_decay: 0.0 });
        for _ in 0..2 {
            opt.accumulate(&g).unwrap();
            opt.sgd_step(&mut n).unwrap();
        }
        for ((t2, t0), g) in n.flat_params().iter().zip(&t0).zip(g.flat()) {
            let expect = t0 - (2.0 + mu) * lr * g;
            assert!((t2 - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn step_without_gradients_is_rejected() {
        let mut n = net();
        let mut opt = OptState::new(&n, SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert!(opt.sgd_step(&mut n).is_err());
    }
}
