//! Adam with per-parameter moments keyed by name.
//!
//! Moments exist only for parameters that have received a gradient, so a
//! parameter outside the trainable set is never read or written.

use std::collections::BTreeMap;

use fsaug_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::NamedTensor;
use crate::error::{ensure, Result};
use crate::store::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, (beta1, beta2): (f64, f64)) -> Self {
        AdamConfig { learning_rate, beta1, beta2, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), Config, "learning rate must be finite and non-negative");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), Config, "Adam betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, Config, "Adam eps must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Names of parameters with allocated moments.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update for the given `(name, gradient)` pairs.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: Vec<(String, Tensor<T>)>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.eps));
        for (name, g) in grads {
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            let p = params.value_mut(&name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let delta = lr * (*mv / bias1) / ((*vv / bias2).sqrt() + eps);
                if delta != T::zero() {
                    *pv -= delta;
                }
            }
        }
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        for (name, st) in &self.moments {
            out.push(NamedTensor { name: format!("{prefix}m/{name}"), group: "moment".into(), value: st.m.clone() });
            out.push(NamedTensor { name: format!("{prefix}v/{name}"), group: "moment".into(), value: st.v.clone() });
        }
        out
    }

    pub fn from_named(config: AdamConfig, step: u64, tensors: &[NamedTensor<T>], prefix: &str) -> Result<Self> {
        let mut moments: BTreeMap<String, Moments<T>> = BTreeMap::new();
        for t in tensors {
            if let Some(name) = t.name.strip_prefix(&format!("{prefix}m/")) {
                moments.entry(name.to_string()).or_insert_with(|| Moments { m: Tensor::zeros(&[0]), v: Tensor::zeros(&[0]) }).m = t.value.clone();
            } else if let Some(name) = t.name.strip_prefix(&format!("{prefix}v/")) {
                moments.entry(name.to_string()).or_insert_with(|| Moments { m: Tensor::zeros(&[0]), v: Tensor::zeros(&[0]) }).v = t.value.clone();
            }
        }
        for (name, st) in &moments {
            ensure!(st.m.shape() == st.v.shape(), Consistency, "moment shapes disagree for {name}");
        }
        Ok(Adam { config, step, moments })
    }
}
