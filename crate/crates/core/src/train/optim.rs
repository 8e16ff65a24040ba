use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::param(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for every learnable tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamWState<T> {
    /// Zero moments mirroring the learnable tensors of `params`.
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for p in params.iter().filter(|p| p.kind == ParamKind::Learnable) {
            let z = Tensor::zeros(p.value.shape());
            m.insert(p.name.clone(), z.clone(), ParamKind::Learnable).expect("unique names");
            v.insert(p.name.clone(), z, ParamKind::Learnable).expect("unique names");
        }
        Self { config, step: 0, m, v }
    }

    /// Adds zero moments for learnable tensors that appeared since creation
    /// (a freshly attached classifier head).
    pub fn sync(&mut self, params: &ParamStore<T>) {
        for p in params.iter().filter(|p| p.kind == ParamKind::Learnable) {
            if !self.m.contains(&p.name) {
                let z = Tensor::zeros(p.value.shape());
                self.m.insert(p.name.clone(), z.clone(), ParamKind::Learnable).expect("checked");
                self.v.insert(p.name.clone(), z, ParamKind::Learnable).expect("checked");
            }
        }
    }
}

/// One decoupled-weight-decay Adam update of every learnable tensor for which
/// `update(name)` holds. Tensors without an entry in `grads` are treated as
/// having zero gradient. Gradients are checked before anything is modified.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &HashMap<String, Vec<T>>,
    state: &mut AdamWState<T>,
    lr: f64,
    update: &dyn Fn(&str) -> bool,
) -> Result<()> {
    for p in params.iter().filter(|p| p.kind == ParamKind::Learnable && update(&p.name)) {
        if let Some(g) = grads.get(&p.name) {
            if g.len() != p.value.numel() {
                return Err(Error::shape(format!(
                    "gradient for {} has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter {} at index {i}",
                    g[i], p.name
                )));
            }
        }
        if !state.m.contains(&p.name) {
            return Err(Error::contract(format!("optimizer has no moments for {}", p.name)));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let (lr_t, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::Learnable) {
        if !update(&p.name) {
            continue;
        }
        let g = grads.get(&p.name);
        let m = state.m.get_mut(&p.name).expect("checked").data_mut();
        let v = state.v.get_mut(&p.name).expect("checked").data_mut();
        for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mh = m[i] * inv_bc1;
            let vh = v[i] * inv_bc2;
            *theta = *theta - lr_t * (mh / (vh.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap(), ParamKind::Learnable)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = store(&[2.0, -4.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        adamw_step(&mut p, &HashMap::new(), &mut st, 0.1, &|_| true).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        assert!((w[1] + 4.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        let g = HashMap::from([("w".to_string(), vec![1.0])]);
        adamw_step(&mut p, &g, &mut st, 0.001, &|_| true).unwrap();
        let delta = p.get("w").unwrap().data()[0];
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let g = HashMap::from([("w".to_string(), vec![f64::NAN])]);
        match adamw_step(&mut p, &g, &mut st, 0.1, &|_| true) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
