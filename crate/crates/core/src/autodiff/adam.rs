use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Gradients are left in place;
    /// callers zero them. Fails without touching anything when a gradient is
    /// missing.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in params {
            let n = param.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(Error::Shape { op: "adam_step", lhs: vec![m.len()], rhs: param.shape().to_vec() });
            }
            let grad = param.grad().expect("checked above").to_vec();
            for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Moment buffer shapes, for invariant checks.
    pub fn moment_len(&self, name: &str) -> Option<(usize, usize)> {
        Some((self.first.get(name)?.len(), self.second.get(name)?.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(1.5, 0.0);
        let mut adam = AdamState::new(0.1);
        adam.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; update = 0.1 / (1 + 1e-8)
        let mut p = param(0.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.step([("p", &mut p)]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad(), Some(&[1.0][..]));
    }

    #[test]
    fn step_counter_increments() {
        let mut p = param(0.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.step([("p", &mut p)]).unwrap();
        adam.step([("p", &mut p)]).unwrap();
        assert_eq!(adam.steps(), 2);
        assert_eq!(adam.moment_len("p"), Some((1, 1)));
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut a = param(0.0, 1.0);
        let mut b = Tensor::scalar(2.0);
        let mut adam = AdamState::new(0.1);
        let err = adam.step([("a", &mut a), ("b.weight", &mut b)]).unwrap_err();
        assert!(err.to_string().contains("b.weight"));
        assert_eq!(a.data(), &[0.0]);
        assert_eq!(adam.steps(), 0);
    }
}
