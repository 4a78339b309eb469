use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                let (r, c) = p.shape();
                (Tensor::zeros(r, c), Tensor::zeros(r, c))
            })
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified if any shape disagrees.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), GradError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(GradError::ParamCount {
                expected: self.m.len(),
                params: params.len(),
                grads: grads.len(),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> (Vec<Tensor>, AdamState) {
        let params = vec![Tensor::scalar(0.0)];
        let state = AdamState::new(AdamConfig::default(), &params);
        (params, state)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut params, mut state) = scalar_state();
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].item().unwrap() - expected).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::filled(2, 3, 0.25)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            state.step(&mut params, &[Tensor::zeros(2, 3)]).unwrap();
        }
        assert_eq!(params[0], Tensor::filled(2, 3, 0.25));
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn constant_gradient_two_steps() {
        // Bias-corrected recurrence with constant g gives m̂ = g and v̂ = g² at every
        // step, so each delta is -lr·|g|/(|g|+ε) in the direction of -g.
        let (mut params, mut state) = scalar_state();
        let mut deltas = Vec::new();
        for _ in 0..2 {
            let before = params[0].item().unwrap();
            state.step(&mut params, &[Tensor::scalar(0.3)]).unwrap();
            deltas.push(params[0].item().unwrap() - before);
        }
        assert!(deltas.iter().all(|d| *d < 0.0));
        for d in deltas {
            assert!((d.abs() - 1e-3).abs() < 1e-5, "{d}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected_without_side_effects() {
        let mut params = vec![Tensor::zeros(2, 2)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[Tensor::zeros(1, 2)]).unwrap_err();
        assert!(matches!(err, GradError::ShapeMismatch { .. }));
        assert_eq!(state.step_count(), 0);
    }
}
