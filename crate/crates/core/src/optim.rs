//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for every parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn round_to_f32(&mut self) {
        self.m.round_to_f32();
        self.v.round_to_f32();
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One Adam update of every parameter that has a gradient.
///
/// Parameters without an entry in `grads` are left alone, moments included.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads {
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let m = state.m.get(name)?.data();
        let v = state.v.get(name)?.data();
        let p = params.get_mut(name)?.data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
