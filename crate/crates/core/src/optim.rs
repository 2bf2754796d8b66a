//! Adam with bias-corrected moment estimates.

use thiserror::Error;

use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient for parameter {name} has {got} entries, expected {expected}")]
    GradientShape { name: String, expected: usize, got: usize },
    #[error("{got} gradients for {expected} parameters")]
    GradientCount { expected: usize, got: usize },
    #[error("invalid Adam hyperparameters: {0}")]
    Hyper(String),
}

type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(OptimError::Hyper(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(OptimError::Hyper(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-parameter first and second moments plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: &[usize], config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn for_params(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.numel()).collect();
        Self::new(&sizes, config)
    }

    /// Rebuild a saved state. Moment vectors must pair up in length.
    pub fn from_parts(config: AdamConfig, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(OptimError::Hyper("first and second moments disagree in shape".into()));
        }
        Ok(Adam { config, m, v, step })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over raw parameter slices. On error nothing is modified;
    /// errors name parameters by `name(index)`.
    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::GradientCount {
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let expected = self.m[i].len();
            if p.len() != expected || g.len() != expected {
                return Err(OptimError::GradientShape {
                    name: name(i),
                    expected,
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name(i)));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// One update of every parameter in `params`, in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let grad_slices: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        let mut param_slices: Vec<&mut [f64]> = params.tensors_mut().map(Tensor::data_mut).collect();
        self.step_slices(&mut param_slices, &grad_slices, lr, |i| names[i].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_scalar(x0: f64, lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut adam = Adam::new(&[1], AdamConfig::default()).unwrap();
        let mut x = [x0];
        let mut path = vec![x0];
        for _ in 0..steps {
            let g = [grad(x[0])];
            adam.step_slices(&mut [&mut x[..]], &[&g[..]], lr, |_| "x".into()).unwrap();
            path.push(x[0]);
        }
        path
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let path = run_scalar(0.7, 0.1, 10, |_| 0.0);
        assert!(path.iter().all(|&x| x == 0.7));
    }

    // Independent scalar simulation of Adam on f(x) = x^2 from x0 = 1, lr 0.1.
    const QUADRATIC_PATH: [(usize, f64); 6] = [
        (1, 0.9000000005),
        (5, 0.507963659264342),
        (10, 0.07624915560691221),
        (11, 0.005131501948057199),
        (12, -0.05893789063004727),
        (20, -0.2711540954901283),
    ];

    #[test]
    fn quadratic_matches_reference_path() {
        let path = run_scalar(1.0, 0.1, 20, |x| 2.0 * x);
        for (t, want) in QUADRATIC_PATH {
            assert!((path[t] - want).abs() < 1e-12, "step {t}: {} vs {want}", path[t]);
        }
        // Momentum carries x past the minimum at step 12; until then |x| shrinks.
        for pair in path[..=11].windows(2) {
            assert!(pair[1].abs() < pair[0].abs(), "{pair:?}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        let path = run_scalar(1.0, 0.1, 1, |_| 3.0);
        assert!((path[1] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let f = |x: f64| 2.0 * x + (3.0 * x).sin();
        assert_eq!(run_scalar(1.3, 0.05, 50, f), run_scalar(1.3, 0.05, 50, f));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut adam = Adam::new(&[2, 1], AdamConfig::default()).unwrap();
        let (mut a, mut b) = ([1.0, 2.0], [3.0]);
        let err = adam
            .step_slices(&mut [&mut a[..], &mut b[..]], &[&[0.1, 0.2][..], &[f64::NAN][..]], 0.1, |i| {
                format!("p{i}")
            })
            .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("p1".into()));
        assert_eq!((a, b, adam.steps()), ([1.0, 2.0], [3.0], 0));
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        for config in [
            AdamConfig { beta1: 1.0, ..AdamConfig::default() },
            AdamConfig { beta2: -0.1, ..AdamConfig::default() },
            AdamConfig { eps: 0.0, ..AdamConfig::default() },
        ] {
            assert!(Adam::new(&[1], config).is_err());
        }
    }
}
