//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::mlpnet::MlpParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators over flat parameter storage.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam { config, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    /// One update over a sequence of parameter/gradient block pairs.
    ///
    /// Fails without touching any state if a gradient entry is non-finite.
    pub fn step_blocks<'a>(&mut self, params: impl IntoIterator<Item = &'a mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.m.len() {
            return Err(Error::Internal(format!("gradient has {total} entries, optimizer tracks {}", self.m.len())));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training { step: self.t as usize + 1, detail: "non-finite gradient".into() });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Internal("parameter/gradient block size mismatch".into()));
            }
            let m = &mut self.m[offset..offset + g.len()];
            let v = &mut self.v[offset..offset + g.len()];
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += g.len();
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut MlpParams, grad: &MlpParams) -> Result<()> {
        self.step_blocks(params.blocks_mut(), &grad.blocks())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::Rng;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = MlpParams::init(&mut Rng::new(0));
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), p.num_params());
        adam.step(&mut p, &MlpParams::zeros()).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let lr = 3e-4;
        for g in [0.5, -3.0, 1e-2, 250.0] {
            let mut theta = [1.0f64];
            let mut adam = Adam::new(AdamConfig::default(), 1);
            adam.step_blocks([&mut theta[..]], &[&[g]]).unwrap();
            let delta = theta[0] - 1.0;
            assert_eq!(delta.signum(), -g.signum());
            assert!(delta.abs() <= lr && delta.abs() >= lr * (1.0 - 1e-6), "g={g}: {delta}");
        }
    }

    #[test]
    fn quadratic_descent() {
        let mut theta = [1.0f64];
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let mut prev = theta[0].abs();
        for _ in 0..100 {
            let g = 2.0 * theta[0];
            adam.step_blocks([&mut theta[..]], &[&[g]]).unwrap();
            assert!(theta[0].abs() < prev);
            prev = theta[0].abs();
        }
        assert!(adam.second_moments().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut theta = [1.0f64, 2.0];
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let err = adam.step_blocks([&mut theta[..]], &[&[0.1, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Training { step: 1, .. }));
        assert_eq!(theta, [1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut rng = Rng::new(4);
            let mut theta = vec![0.5f64; 8];
            let mut adam = Adam::new(AdamConfig::default(), 8);
            for _ in 0..50 {
                let g: Vec<f64> = (0..8).map(|_| rng.next_f64() - 0.5).collect();
                adam.step_blocks([&mut theta[..]], &[&g]).unwrap();
            }
            theta
        };
        assert_eq!(run(), run());
    }
}
