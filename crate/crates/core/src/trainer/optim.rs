use crate::error::{Error, Result};
use crate::model::{Encoder, NamedTensors, Params};

/// Decoupled weight-decay Adam state over the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Params,
    pub v: Params,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Only projection weights decay; biases, norms, `[CLS]` and mask tokens do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with bias correction for step number `t` (1-based).
    pub fn step(&mut self, params: &mut Params, grads: &Params, t: u64, h: AdamHyper) {
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            let wd = if decays(&name) { h.weight_decay } else { 0.0 };
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= h.lr * (mhat / (vhat.sqrt() + h.eps) + wd * p[i]);
            }
        }
    }
}

/// `target <- lambda * target + (1 - lambda) * context`, element-wise.
pub fn ema_update(target: &mut Encoder, context: &Encoder, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("EMA momentum {lambda} outside [0, 1]")));
    }
    let src = context.tensors();
    let dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} tensors, context {}",
            dst.len(),
            src.len()
        )));
    }
    for ((dn, d), (sn, s)) in dst.into_iter().zip(src) {
        if dn != sn || d.shape() != s.shape() {
            return Err(Error::ShapeMismatch(format!(
                "target `{dn}` {:?} vs context `{sn}` {:?}",
                d.shape(),
                s.shape()
            )));
        }
        for (t, c) in d.data_mut().iter_mut().zip(s.data()) {
            *t = lambda * *t + (1.0 - lambda) * c;
        }
    }
    Ok(())
}
