use serde::{Deserialize, Serialize};

use super::{Parameter, Result, Tensor, TensorError};

/// `θ ← θ − lr·g` using each parameter's gradient slot.
pub fn sgd_step(params: &mut [Parameter], lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(TensorError::Usage(format!("learning rate must be non-negative, got {lr}")));
    }
    for p in params.iter_mut() {
        p.value.check_same_shape(&p.grad, "sgd_step")?;
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Parameter], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep matching the parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Dimension {
                op: "adam_step",
                msg: format!("state tracks {} tensors, got {}", self.m.len(), params.len()),
            });
        }
        for (p, m) in params.iter().zip(&self.m) {
            p.value.check_same_shape(m, "adam_step")?;
            p.grad.check_same_shape(m, "adam_step")?;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..value.len() {
                let g = grad[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("x", Tensor::scalar(v));
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![Parameter::new("t", Tensor::from_vec(vec![1.0, 2.0]))];
        p[0].grad = Tensor::from_vec(vec![1.0, 1.0]);
        sgd_step(&mut p, 0.0).unwrap();
        assert_eq!(p[0].value.data(), &[1.0, 2.0]);
        sgd_step(&mut p, 0.1).unwrap();
        assert_eq!(p[0].value.data(), &[0.9, 1.9]);
    }

    #[test]
    fn sgd_is_linear_in_constant_gradients() {
        let mut a = vec![scalar_param(0.75, 0.5)];
        sgd_step(&mut a, 0.25).unwrap();
        sgd_step(&mut a, 0.25).unwrap();
        let mut b = vec![scalar_param(0.75, 1.0)];
        sgd_step(&mut b, 0.25).unwrap();
        assert_eq!(a[0].value, b[0].value);
    }

    #[test]
    fn adam_zero_gradient_only_advances_counter() {
        let mut p = vec![scalar_param(3.0, 0.0)];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p).unwrap();
        assert_eq!(p[0].value.data(), &[3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = vec![scalar_param(0.0, 1.0)];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = vec![scalar_param(0.3, 0.0), Parameter::new("y", Tensor::zeros(&[3]))];
        let mut b = a.clone();
        let (mut oa, mut ob) = (Adam::with_lr(0.01), Adam::with_lr(0.01));
        for k in 0..50 {
            let g = (k as f64 * 0.37).sin();
            for set in [&mut a, &mut b] {
                set[0].grad = Tensor::scalar(g);
                set[1].grad = Tensor::from_vec(vec![g, -g, 2.0 * g]);
            }
            oa.step(&mut a).unwrap();
            ob.step(&mut b).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_shape_change() {
        let mut adam = Adam::with_lr(0.1);
        adam.step(&mut [scalar_param(0.0, 1.0)]).unwrap();
        let mut other = [Parameter::new("x", Tensor::zeros(&[2]))];
        assert!(adam.step(&mut other).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut p = vec![Parameter::new("x", Tensor::zeros(&[2]))];
        p[0].grad = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        assert!((p[0].grad.data()[0] - 0.6).abs() < 1e-15);
    }
}
