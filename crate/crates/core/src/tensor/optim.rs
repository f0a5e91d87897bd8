use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// First-order optimizer with its running state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Gradients are paired with `params` by position.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Vec<f64>]) -> Result<()> {
        {
            let named = params.named_params();
            if named.len() != grads.len() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("{} parameters but {} gradients", named.len(), grads.len()),
                ));
            }
            for ((name, p), g) in named.iter().zip(grads) {
                if p.numel() != g.len() {
                    return Err(Error::dim(
                        "optimizer_step",
                        format!("parameter `{name}` has {} values, gradient {}", p.numel(), g.len()),
                    ));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { param: name.clone() });
                }
            }
        }

        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.params_mut().into_iter().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let params = params.params_mut();
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((w, d), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl ParamSet for One {
        fn named_params(&self) -> Vec<(String, &Tensor)> {
            vec![("p".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn sgd_definition() {
        let mut p = One(Tensor::scalar(1.0));
        OptimizerState::sgd(0.1).step(&mut p, &[vec![2.0]]).unwrap();
        assert!((p.0.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [-3.0, 1e-3, 250.0] {
            let mut p = One(Tensor::scalar(0.5));
            let mut opt = OptimizerState::adam(0.01);
            opt.step(&mut p, &[vec![g]]).unwrap();
            // m_hat = g, v_hat = g², so the step is lr·g/(|g|+ε).
            let expected = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p.0.data()[0] - expected).abs() < 1e-15);
            assert!(((p.0.data()[0] - 0.5).abs() - 0.01).abs() < 1e-6);
            assert_eq!(opt.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = One(Tensor::vector(vec![1.0, -2.0, 3.0]));
            let mut opt = OptimizerState::new(kind, 0.5);
            for _ in 0..5 {
                opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
            }
            assert_eq!(p.0.data(), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = One(Tensor::scalar(1.0));
        let err = OptimizerState::adam(0.1).step(&mut p, &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "p"));
    }

    #[test]
    fn gradient_count_mismatch() {
        let mut p = One(Tensor::scalar(1.0));
        assert!(OptimizerState::sgd(0.1).step(&mut p, &[]).is_err());
        assert!(OptimizerState::sgd(0.1).step(&mut p, &[vec![1.0, 2.0]]).is_err());
    }
}
