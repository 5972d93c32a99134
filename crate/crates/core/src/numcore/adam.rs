use indexmap::IndexMap;

use super::{Gradients, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            b1: 0.9,
            b2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: IndexMap<String, Tensor<F>>,
    pub v: IndexMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<F: Scalar>(params: &mut ParamSet<F>, grads: &Gradients<F>, state: &mut AdamState<F>) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Missing(format!("gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam gradient", p.shape(), g.shape()));
        }
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::Missing(format!("adam moment for {name}")))?;
        if m.shape() != p.shape() {
            return Err(Error::shape("adam moment", p.shape(), m.shape()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (F::of(c.b1), F::of(c.b2));
    let bc1 = F::of(1.0 - c.b1.powi(t));
    let bc2 = F::of(1.0 - c.b2.powi(t));
    let lr = F::of(c.lr);
    let eps = F::of(c.eps_hat);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).unwrap().data();
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
