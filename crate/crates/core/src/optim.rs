//! Adam over a named parameter store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("beta {b} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3, 0.9, 0.999)
    }
}

/// First and second moments plus the update count. Moments are created
/// lazily, zero-initialised, for the parameters that receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One bias-corrected Adam update. Every gradient must name a parameter
    /// of `params`; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, grad) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Param(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != grad.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient of {name}: {:?} vs {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            if !grad.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let step_size = T::lit(c.lr / bc1);
        let bc2_sqrt = T::lit(libm::sqrt(bc2));
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        for (name, grad) in grads {
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(grad.shape()));
                self.v.insert(name.clone(), Tensor::zeros(grad.shape()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            let p = params.get_mut(name).unwrap().data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] = p[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.v.is_finite()
    }
}

/// Rescale gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![v]));
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1], vec![v]));
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g) (up to eps).
        for (b1, b2) in [(0.9, 0.999), (0.0, 0.99)] {
            let mut p = one_param(1.0);
            let mut opt = Adam::new(AdamConfig::new(0.1, b1, b2));
            opt.update(&mut p, &grad(3.0)).unwrap();
            assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamConfig::new(0.01, 0.5, 0.9);
        let mut p = one_param(2.0);
        let mut opt = Adam::new(cfg);
        let grads: Vec<f64> = vec![0.3, -1.2, 0.7, 2.0, -0.1];
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, &gv) in grads.iter().enumerate() {
            opt.update(&mut p, &grad(gv)).unwrap();
            let t = (t + 1) as i32;
            m = 0.5 * m + 0.5 * gv;
            v = 0.9 * v + 0.1 * gv * gv;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-12);
        }
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = one_param(5.0);
        let mut opt = Adam::new(AdamConfig::new(0.05, 0.9, 0.999));
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            opt.update(&mut p, &grad(2.0 * (w - 1.0))).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_unknown_and_non_finite() {
        let mut p = one_param(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), Tensor::new(&[1], vec![1.0]));
        assert!(opt.update(&mut p, &bad).is_err());
        assert!(matches!(opt.update(&mut p, &grad(f64::NAN)), Err(Error::Divergence(_))));
        assert_eq!(opt.step, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::new(1e-4, 0.0, 0.99).validate().is_ok());
        assert!(AdamConfig::new(0.0, 0.0, 0.99).validate().is_err());
        assert!(AdamConfig::new(1e-4, 1.0, 0.99).validate().is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0f64, 4.0]));
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
