use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Gradient-descent state. Adam keeps bias-corrected first and second
/// moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let moments = match config {
            OptimizerConfig::Sgd => 0,
            OptimizerConfig::Adam { .. } => num_params,
        };
        Self {
            config,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], learning_rate: f64) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= learning_rate * g;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= learning_rate * m / (v.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![0.5, -1.0];
        let mut opt = Optimizer::new(OptimizerConfig::default(), 2);
        for _ in 0..10 {
            opt.step(&mut p, &[0.0, 0.0], 0.1);
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut p = vec![0.0];
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1);
        opt.step(&mut p, &[123.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0];
        Optimizer::new(OptimizerConfig::Sgd, 1).step(&mut p, &[2.0], 0.25);
        assert_eq!(p, vec![0.5]);
    }
}
