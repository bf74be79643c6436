use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam epsilon must be positive, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update in place. `t` is the 1-based step index.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    lr: f64,
    t: u64,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam moments for a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Ok(Self {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the step counter and updates slot `i` for every `(i, param,
    /// grad)` triple supplied.
    pub fn update<'a>(&mut self, lr: f64, slots: impl IntoIterator<Item = (usize, &'a mut [f64], &'a [f64])>) {
        self.step += 1;
        for (i, p, g) in slots {
            adam_step(p, g, &mut self.first[i], &mut self.second[i], &self.config, lr, self.step);
        }
    }

    /// Grows the moment table when a parameter is appended.
    pub fn push_slot(&mut self, size: usize) {
        self.first.push(vec![0.0; size]);
        self.second.push(vec![0.0; size]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_closed_form_magnitude() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![0.5, -2.0, 7.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut p, &[1.0; 3], &mut m, &mut v, &cfg, cfg.lr, 1);
        let expect = cfg.lr / (1.0 + cfg.eps);
        for (after, before) in p.iter().zip([0.5, -2.0, 7.0]) {
            assert!(((before - after) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.25, -3.5];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg, cfg.lr, 1);
        assert_eq!(p, vec![1.25, -3.5]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        for (lr, eps) in [(0.0, 1e-8), (-1.0, 1e-8), (1e-3, 0.0)] {
            let cfg = AdamConfig {
                lr,
                eps,
                ..Default::default()
            };
            assert!(Adam::new(cfg, [1]).is_err());
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // f(x) = (x - 2)^2 from x = 0. Reference trajectory from the same
        // recurrence written out longhand.
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut x = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let (mut rx, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        let mut losses = Vec::new();
        for t in 1..=50u64 {
            let g = 2.0 * (x[0] - 2.0);
            adam_step(&mut x, &[g], &mut m, &mut v, &cfg, cfg.lr, t);
            let rg = 2.0 * (rx - 2.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-12);
            losses.push((x[0] - 2.0).powi(2));
        }
        assert!((x[0] - 2.0).abs() < 0.5);
        // strictly decreasing until the iterate first crosses the minimum
        let crossing = losses.iter().position(|&l| l < 1e-3).unwrap();
        assert!(crossing > 10);
        assert!(losses[..=crossing].windows(2).all(|w| w[1] < w[0]));
        assert!(losses[49] < losses[0]);
    }
}
