//! Adam with bias correction, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam state keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            state: BTreeMap::new(),
        })
    }

    /// Rebuild from serialized parts.
    pub fn from_parts(config: AdamConfig, t: u64, state: BTreeMap<String, Moments<T>>) -> Result<Self> {
        config.validate()?;
        Ok(Adam { config, t, state })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// Apply one update from the accumulated gradients, then zero them.
    ///
    /// If any gradient is non-finite or mismatches its stored moment shape,
    /// nothing is modified and an error is returned.
    pub fn step(&mut self, model: &mut dyn Parameterized<T>) -> Result<()> {
        let mut problem: Option<Error> = None;
        model.visit_params("", &mut |name, p| {
            if problem.is_some() {
                return;
            }
            if !p.grad.all_finite() {
                problem = Some(Error::NonFinite(format!("gradient of {name}")));
            } else if let Some(s) = self.state.get(name) {
                if s.m.shape() != p.value.shape() {
                    problem = Some(Error::shape(format!(
                        "optimizer state for {name} has shape {:?}, parameter has {:?}",
                        s.m.shape(),
                        p.value.shape()
                    )));
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr, eps, bc1, bc2) = (T::of(lr), T::of(eps), T::of(bc1), T::of(bc2));
        let state = &mut self.state;
        model.visit_params("", &mut |name, p| {
            let s = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(s.m.data_mut().iter_mut().zip(s.v.data_mut()));
            for ((theta, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        });
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Real>(model: &mut dyn Parameterized<T>) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| sq += p.grad.sq_norm().as_f64());
    sq.sqrt()
}

/// Scale all gradients so their global norm is at most `max_norm`; returns the scale.
pub fn clip_grad_norm<T: Real>(model: &mut dyn Parameterized<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("max_norm must be > 0"));
    }
    let norm = grad_norm(model);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = T::of(scale);
    model.visit_params("", &mut |_, p| {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
    });
    Ok(scale)
}
