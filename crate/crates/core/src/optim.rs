//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// One update using each parameter's accumulated gradient, then clear the
    /// gradients. Parameters without a gradient are treated as having a zero
    /// gradient (their moments still decay).
    ///
    /// When `ascend` is true the update follows the gradient instead of
    /// opposing it.
    pub fn step(&mut self, params: &mut ParamSet, ascend: bool) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, (_, t)) in params.iter().enumerate() {
            if t.len() != self.first_moment[i].len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} values, moment buffer {}",
                    t.len(),
                    self.first_moment[i].len()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let sign = if ascend { 1.0 } else { -1.0 };
        for (i, t) in params.tensors_mut().enumerate() {
            let grad = t.grad().map(|g| g.to_vec());
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = t.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j] as f64);
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let delta = lr * mhat / (vhat.sqrt() + eps);
                data[j] = (data[j] as f64 + sign * delta) as f32;
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> ParamSet {
        let mut p = ParamSet::default();
        p.insert("w", Tensor::scalar(value).with_grad());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.5);
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        p.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut p, false).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.5);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut opt = AdamState::new(cfg, &p);
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut p, false).unwrap();
        let w = p.get("w").unwrap().item() as f64;
        assert!((w - (1.0 - 0.01)).abs() < 1e-6, "{w}");
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // hand-rolled reference, independent of the implementation above
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.3f64, -1.2];
        let (mut x, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        let mut trace = vec![];
        for (k, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            trace.push(x);
        }

        let mut p = single(0.25);
        let mut opt = AdamState::new(
            AdamConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &p,
        );
        for (g, want) in grads.iter().zip(&trace) {
            p.get_mut("w").unwrap().accumulate_grad(&[*g as f32]).unwrap();
            opt.step(&mut p, false).unwrap();
            let got = p.get("w").unwrap().item() as f64;
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = single(1.0);
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        let mut other = ParamSet::default();
        other.insert("w", Tensor::zeros(&[3]).with_grad());
        assert!(matches!(opt.step(&mut other, false), Err(Error::Shape(_))));
    }
}
