//! Gradient-descent optimizers with decoupled weight decay (SGDW / AdamW),
//! plus the cosine learning-rate schedule. Optimizer state is kept at f64
//! regardless of the parameter precision.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Parameter;

#[derive(Clone, Copy, Debug)]
pub enum OptimKind {
    /// Momentum gradient descent with decoupled weight decay.
    Sgdw { momentum: f64 },
    /// Adaptive-moment gradient descent with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer { kind, lr, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn sgdw(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self::new(OptimKind::Sgdw { momentum }, lr, weight_decay)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, lr, weight_decay)
    }

    /// Applies one update from the parameters' accumulated gradients, scaled
    /// by `lr_scale` (the schedule), then clears the gradients.
    pub fn step<T: Scalar>(&mut self, params: &[&Parameter<T>], lr_scale: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.kind, OptimKind::AdamW { .. }) {
                self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("parameter count changed: {} vs {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let lr = self.lr * lr_scale;
        let wd = self.weight_decay;
        for (pi, p) in params.iter().enumerate() {
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => continue,
            };
            let mut x: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
            match self.kind {
                OptimKind::Sgdw { momentum } => {
                    let buf = &mut self.m[pi];
                    for j in 0..x.len() {
                        buf[j] = momentum * buf[j] + grad[j];
                        x[j] -= lr * buf[j] + lr * wd * x[j];
                    }
                }
                OptimKind::AdamW { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let m = &mut self.m[pi];
                    let v = &mut self.v[pi];
                    for j in 0..x.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        x[j] -= lr * (mh / (vh.sqrt() + eps) + wd * x[j]);
                    }
                }
            }
            p.set_data(x.iter().map(|v| T::from_f64(*v)).collect());
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine decay from 1 at step 0 to 0 at `total` steps.
pub fn cosine_schedule(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let x = (step.min(total)) as f64 / total as f64;
    0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgdw_minimizes_quadratic() {
        let p = Parameter::from_f64("x", &[3.0, -2.0], &[2]);
        let mut opt = Optimizer::sgdw(0.05, 0.0, 0.9);
        for _ in 0..400 {
            p.zero_grad();
            let loss = p.tensor().mul(&p.tensor()).unwrap().sum_all();
            loss.backward();
            opt.step(&[&p], 1.0).unwrap();
        }
        assert!(p.data().iter().all(|v: &f64| v.abs() < 1e-3));
    }

    #[test]
    fn adamw_minimizes_quadratic_and_decays() {
        let p = Parameter::<f64>::from_f64("x", &[1.5], &[1]);
        let mut opt = Optimizer::adamw(0.05, 0.0);
        for _ in 0..200 {
            p.zero_grad();
            let shifted = p.tensor().add_scalar(-0.5);
            let loss = shifted.mul(&shifted).unwrap().sum_all();
            loss.backward();
            opt.step(&[&p], 1.0).unwrap();
        }
        assert!((p.data()[0] - 0.5).abs() < 1e-2, "{}", p.data()[0]);

        // decoupled decay shrinks a gradient-free parameter geometrically
        let q = Parameter::<f64>::from_f64("q", &[1.0], &[1]);
        let mut opt = Optimizer::adamw(1.0, 0.01);
        for _ in 0..10 {
            q.zero_grad();
            // gradient of zero: loss does not involve q
            let loss = Tensor::<f64>::zeros(&[1]).sum_all();
            loss.backward();
            opt.step(&[&q], 1.0).unwrap();
        }
        // no gradient accumulated -> parameter untouched by the moment terms
        assert_eq!(q.data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_schedule(0, 100), 1.0);
        assert!((cosine_schedule(50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_schedule(100, 100).abs() < 1e-12);
        assert_eq!(cosine_schedule(5, 0), 1.0);
    }
}
