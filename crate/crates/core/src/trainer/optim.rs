use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps exceeds the {total_steps}-step budget"
            )));
        }
        if total_steps == 0 || !(peak_lr.is_finite() && peak_lr >= 0.0) {
            return Err(Error::Config(format!(
                "invalid schedule: peak {peak_lr}, {total_steps} steps"
            )));
        }
        Ok(Schedule {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup over `frac` of the budget (at least one step).
    pub fn with_warmup_fraction(peak_lr: f64, total_steps: usize, frac: f64) -> Result<Self> {
        let warmup = ((total_steps as f64 * frac).round() as usize).clamp(1, total_steps.max(1));
        Schedule::new(peak_lr, warmup, total_steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::OutOfRange(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let s = step as f64;
        Ok(if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                self.peak_lr
            } else {
                self.peak_lr * s / self.warmup_steps as f64
            }
        } else {
            self.peak_lr * (self.total_steps - step) as f64
                / (self.total_steps - self.warmup_steps) as f64
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    names: Vec<String>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    /// `decay[i]` says whether parameter `i` takes weight decay.
    pub fn new(params: &[Tensor<T>], decay: Vec<bool>, config: AdamConfig) -> Result<Self> {
        if decay.len() != params.len() {
            return Err(Error::Config(format!(
                "{} decay flags for {} parameters",
                decay.len(),
                params.len()
            )));
        }
        Ok(AdamState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay,
            names: (0..params.len()).map(|i| format!("param[{i}]")).collect(),
            step: 0,
        })
    }

    /// Parameter names used in divergence diagnostics.
    pub fn with_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.names.len() {
            self.names = names;
        }
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)` (the decay term only where enabled).
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, optimizer tracks {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "{}: parameter {:?}, gradient {:?}",
                state.names[i],
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step: state.step as usize + 1,
                what: format!(
                    "non-finite gradient {} in {} at element {j}",
                    g.data()[j].to_f64(),
                    state.names[i]
                ),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    let eps = T::from_f64(c.eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(lr * c.weight_decay);
    for i in 0..params.len() {
        let decay = state.decay[i] && c.weight_decay != 0.0;
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = p[j];
            p[j] = old - lr_t * m_hat / (v_hat.sqrt() + eps);
            if decay {
                p[j] -= wd * old;
            }
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(5e-4, 4000, 10000).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(2000).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(4000).unwrap(), 5e-4);
        assert!((s.lr_at(7000).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(10000).unwrap(), 0.0);
        assert!(s.lr_at(10001).is_err());
        assert!(Schedule::new(1e-3, 11, 10).is_err());
    }

    #[test]
    fn scalar_adam_example() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let g = vec![Tensor::full(&[1], 1.0)];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, vec![true], cfg).unwrap();
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_grads_and_zero_lr_leave_params() {
        let init = vec![Tensor::<f64>::from_f64(&[2], &[0.5, -2.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = init.clone();
        let mut st = AdamState::new(&p, vec![true], cfg).unwrap();
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1).unwrap();
        assert_eq!(p, init);
        let g = vec![Tensor::full(&[2], 3.0)];
        adam_step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn decay_exemption() {
        let mut p = vec![Tensor::<f64>::full(&[1], 1.0), Tensor::full(&[1], 1.0)];
        let g = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut st = AdamState::new(&p, vec![true, false], AdamConfig::default()).unwrap();
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p[0].data()[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(p[1].data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut st = AdamState::new(&p, vec![false], AdamConfig::default())
            .unwrap()
            .with_names(vec!["layer.1.ffn.in.weight".into()]);
        let g = vec![Tensor::from_f64(&[2], &[0.0, f64::NAN]).unwrap()];
        let err = adam_step(&mut p, &g, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer.1.ffn.in.weight"), "{err}");
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 0.0]).unwrap(), Tensor::full(&[1], 4.0)];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::full(&[1], 0.5)];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }
}
