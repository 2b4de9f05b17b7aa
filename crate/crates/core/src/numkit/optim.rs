use super::params::ParamStore;
use crate::{Error, Result};

/// Adam hyperparameters plus per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")));
        }
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self { step: 0, lr, beta1, beta2, eps, v: m.clone(), m })
    }

    pub fn with_lr(params: &ParamStore, lr: f64) -> Result<Self> {
        Self::new(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds a state from serialized moments.
    pub fn from_parts(params: &ParamStore, step: u64, hyper: [f64; 4], m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        let mut s = Self::new(params, hyper[0], hyper[1], hyper[2], hyper[3])?;
        let ok = |x: &Vec<Vec<f64>>| x.len() == params.len() && x.iter().zip(params.iter()).all(|(a, (_, t))| a.len() == t.len());
        if !ok(&m) || !ok(&v) {
            return Err(Error::Shape("optimizer moments do not match parameters".into()));
        }
        s.step = step;
        s.m = m;
        s.v = v;
        Ok(s)
    }
}

/// One bias-corrected Adam update using the gradients accumulated in `params`.
/// Parameters without a gradient accumulator are treated as having zero gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("optimizer tracks {} tensors, store has {}", state.m.len(), params.len())));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] = {}", g[i])));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2) = (state.beta1, state.beta2);
    for (k, t) in params.tensors_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.len() != t.len() {
            return Err(Error::Shape(format!("moment {k} has {} entries, parameter has {}", m.len(), t.len())));
        }
        let grad = t.grad().map(<[f64]>::to_vec);
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
