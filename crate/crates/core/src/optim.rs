//! Adam with bias correction.

use crate::params::ParameterSet;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr0: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr0 > 0.0) {
            return Err(format!("lr0 must be > 0, got {}", self.lr0));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// `p -= lr · m̂ / (√v̂ + ε)`. Parameters without a gradient entry are
    /// left untouched (their moments still decay).
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>, lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = T::lit(lr);
        let eps = T::lit(cfg.eps);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("moment shapes follow the parameter set");
            let v = self.v.get_mut(name).expect("moment shapes follow the parameter set");
            let zero_grad;
            let g = match grads.get(name) {
                Ok(g) => g,
                Err(_) => {
                    zero_grad = crate::tensor::Tensor::zeros(p.shape());
                    &zero_grad
                }
            };
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
