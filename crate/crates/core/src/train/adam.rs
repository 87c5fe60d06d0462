//! Adam with bias correction and optional weight decay.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    /// `g ← g + wd·θ` before the moment updates.
    #[default]
    Coupled,
    /// `θ ← θ − lr·wd·θ` separately from the adaptive step.
    Decoupled,
}

/// First/second moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: IndexMap<String, Vec<S>>,
    pub v: IndexMap<String, Vec<S>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &IndexMap<String, Tensor<S>>) -> Self {
        let zeros = || -> IndexMap<String, Vec<S>> {
            params
                .iter()
                .map(|(k, t)| (k.clone(), vec![S::zero(); t.numel()]))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    /// One update of every parameter that has a gradient. Gradients are
    /// checked first, so a non-finite value leaves parameters untouched.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<S>>,
        grads: &IndexMap<String, Vec<S>>,
        lr: f64,
        weight_decay: f64,
        mode: WeightDecay,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("gradient for unknown parameter {name}"))
            })?;
            if g.len() != p.numel() {
                return Err(Error::InvalidArgument(format!(
                    "gradient of {name} has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {name} at element {i}"
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps) = (S::one(), S::of(self.eps));
        let c1 = S::of(1.0 - self.beta1.powf(self.t as f64));
        let c2 = S::of(1.0 - self.beta2.powf(self.t as f64));
        let (lr_s, wd) = (S::of(lr), S::of(weight_decay));
        for (name, g) in grads {
            let theta = params.get_mut(name).expect("checked above").data_mut();
            let m = self.m.get_mut(name).expect("buffers cover all parameters");
            let v = self.v.get_mut(name).expect("buffers cover all parameters");
            for i in 0..theta.len() {
                let mut gi = g[i];
                if mode == WeightDecay::Coupled {
                    gi += wd * theta[i];
                }
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                if mode == WeightDecay::Decoupled {
                    theta[i] -= lr_s * wd * theta[i];
                }
                theta[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
