//! Adam and AdamW over named parameters. Moment state is keyed by parameter
//! name so it serializes into checkpoint archives and survives resume.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Arr, Grads};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    /// Adam with decoupled weight decay applied directly to the weights.
    AdamW,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptConfig {
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptKind::AdamW, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive: {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} must be in [0,1): {v}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("eps must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

pub struct Optimizer {
    cfg: OptConfig,
    step: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Optimizer {
    pub fn new(cfg: OptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn config(&self) -> &OptConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that received a gradient.
    /// Parameters absent from `grads` keep their value and their moments.
    pub fn step(&mut self, params: &[Rc<Param>], grads: &Grads) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for p in params {
            let Some(g) = p.grad(grads) else { continue };
            let g = g.clone();
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let (m, v) = (m.clone(), v.clone());
            p.update(|w| {
                ndarray::Zip::from(&mut *w).and(&m).and(&v).for_each(|w, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    let mut delta = m_hat / (v_hat.sqrt() + c.eps);
                    if c.kind == OptKind::AdamW {
                        delta += c.weight_decay * *w;
                    }
                    *w -= c.lr * delta;
                });
            });
        }
    }

    /// Moment state as named arrays for a checkpoint's extras section.
    /// The step counter rides along as a scalar.
    pub fn state(&self) -> Vec<(String, Arr)> {
        let mut out = vec![(
            "opt.step".to_string(),
            Arr::from_elem(IxDyn(&[]), self.step as f64),
        )];
        for (name, arr) in &self.m {
            out.push((format!("opt.m.{name}"), arr.clone()));
        }
        for (name, arr) in &self.v {
            out.push((format!("opt.v.{name}"), arr.clone()));
        }
        out
    }

    /// Restore from [`Optimizer::state`] output.
    pub fn load_state(&mut self, state: &[(String, Arr)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = 0;
        for (name, arr) in state {
            if name == "opt.step" {
                self.step = arr.iter().next().copied().unwrap_or(0.0) as u64;
            } else if let Some(rest) = name.strip_prefix("opt.m.") {
                self.m.insert(rest.to_string(), arr.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                self.v.insert(rest.to_string(), arr.clone());
            } else {
                return Err(Error::Checkpoint(format!(
                    "unrecognized optimizer entry {name}"
                )));
            }
        }
        Ok(())
    }
}
