//! SGD with Nesterov momentum and the polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Exponent of `(1 - epoch / epochs)^p`.
    pub poly_exponent: f64,
    /// Global L2 norm the gradient is clipped to.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-2, momentum: 0.99, nesterov: true, weight_decay: 3e-5, poly_exponent: 0.9, grad_clip: Some(12.0) }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.poly_exponent < 0.0 {
            return Err(Error::Config("weight decay and poly exponent must be non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `epoch` of `epochs`.
pub fn poly_lr(base: f64, epoch: usize, epochs: usize, exponent: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / epochs.max(1) as f64;
    base * frac.max(0.0).powf(exponent)
}

/// Momentum buffers, one per parameter, created lazily.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub cfg: SgdConfig,
    buffers: Vec<Option<Vec<F>>>,
}

impl<F: Element> Sgd<F> {
    pub fn new(cfg: SgdConfig, num_params: usize) -> Self {
        Self { cfg, buffers: vec![None; num_params] }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &mut [(ParamId, Tensor<F>)], lr: f64) -> Result<f64> {
        let mut sq = 0.0f64;
        for (id, g) in grads.iter() {
            for &v in g.data() {
                let v = v.as_f64();
                sq += v * v;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {} is not finite", params.name(*id))));
            }
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (lr, mu, wd, scale) = (
            F::from_f64_lossy(lr),
            F::from_f64_lossy(self.cfg.momentum),
            F::from_f64_lossy(self.cfg.weight_decay),
            F::from_f64_lossy(scale),
        );
        for (id, g) in grads.iter_mut() {
            let p = params.get_mut(*id);
            let buf = self.buffers[id.index()].get_or_insert_with(|| vec![F::zero(); p.len()]);
            for ((w, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = gv * scale + wd * *w;
                *b = mu * *b + d;
                let upd = if self.cfg.nesterov { d + mu * *b } else { *b };
                *w -= lr * upd;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.01, 0, 10, 0.9), 0.01);
        assert!((poly_lr(0.01, 5, 10, 1.0) - 0.005).abs() < 1e-15);
        assert_eq!(poly_lr(0.01, 10, 10, 0.9), 0.0);
    }

    #[test]
    fn nesterov_matches_hand_update() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(vec![1], &[1.0]).unwrap());
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            poly_exponent: 1.0,
            grad_clip: None,
        };
        let mut opt = Sgd::new(cfg, 1);
        let mut g = vec![(id, Tensor::from_f64(vec![1], &[2.0]).unwrap())];
        opt.step(&mut store, &mut g, 0.1).unwrap();
        // buf = 2, step = 2 + 0.9·2 = 3.8
        assert!((store.get(id).data()[0] - (1.0 - 0.38)).abs() < 1e-12);
        opt.step(&mut store, &mut g, 0.1).unwrap();
        // buf = 0.9·2 + 2 = 3.8, step = 2 + 0.9·3.8 = 5.42
        assert!((store.get(id).data()[0] - (0.62 - 0.542)).abs() < 1e-12);
    }
}
