//! Adam with bias-corrected moment estimates.

use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// `beta1 = 0` drops momentum, the usual choice for EBM training.
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment estimates for each parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s).expect("parameter shapes are positive")).collect();
        Adam {
            config,
            state: AdamState { step: 0, m: zeros(), v: zeros() },
        }
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One update. `params[i]` and `grads[i]` must match the shapes given at
    /// construction.
    ///
    /// m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    /// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    pub fn step(&mut self, params: &mut [&mut [Float]], grads: &[&[Float]]) {
        assert_eq!(params.len(), self.state.m.len());
        assert_eq!(grads.len(), self.state.m.len());
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as Float;
                *vi = v_new as Float;
                let update = c.learning_rate * (m_new / bc1) / ((v_new / bc2).sqrt() + c.epsilon);
                *pi = (*pi as f64 - update) as Float;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recurrence on one scalar, in f64.
    fn reference(cfg: AdamConfig, p0: f64, grads: &[f64]) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        p
    }

    #[test]
    fn scalar_probes_match_reference_recurrence() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4];
        for cfg in [
            AdamConfig::default(),
            AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            AdamConfig { learning_rate: 5e-3, beta1: 0.5, beta2: 0.99, epsilon: 1e-7 },
        ] {
            let mut adam = Adam::new(cfg, &[&[1]]);
            let mut p = [0.0 as Float];
            for &g in &grads {
                adam.step(&mut [&mut p[..]], &[&[g as Float]]);
            }
            let want = reference(cfg, 0.0, &grads);
            assert!((p[0] as f64 - want).abs() <= 1e-7, "{} vs {want}", p[0]);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &[&[2]]);
        let mut p = [1.0 as Float, -1.0];
        adam.step(&mut [&mut p[..]], &[&[0.5, -3.0]]);
        assert!((p[0] as f64 - (1.0 - 1e-4)).abs() < 1e-6);
        assert!((p[1] as f64 - (-1.0 + 1e-4)).abs() < 1e-6);
        assert_eq!(adam.state().step, 1);
    }
}
