use crate::error::{Error, Result};
use crate::params::{FreezeMask, ParamId, ParamStore};

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: vec![None; params.len()],
        }
    }
}

/// One update of every trainable parameter. A trainable parameter without
/// a gradient is treated as having a zero gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    mask: &FreezeMask,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut SgdState,
    momentum: f64,
    lr: f64,
) -> Result<()> {
    let mut by_id: Vec<Option<&[f64]>> = vec![None; params.len()];
    for (id, g) in grads {
        let name = params.name(*id);
        if !mask.is_trainable(name) {
            return Err(Error::InvariantViolation(format!("gradient on frozen parameter `{name}`")));
        }
        if g.len() != params.get(*id).len() {
            return Err(Error::dim("sgd_step", format!("gradient for `{name}` has wrong length")));
        }
        by_id[id.0] = Some(g);
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![None; params.len()];
    }
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        if !mask.is_trainable(params.name(id)) {
            continue;
        }
        let n = params.get(id).len();
        let v = state.velocity[id.0].get_or_insert_with(|| vec![0.0; n]);
        match by_id[id.0] {
            Some(g) => v.iter_mut().zip(g).for_each(|(v, g)| *v = momentum * *v + g),
            None => v.iter_mut().for_each(|v| *v *= momentum),
        }
        for (p, v) in params.get_mut(id).data_mut().iter_mut().zip(v.iter()) {
            *p -= lr * v;
        }
    }
    Ok(())
}

/// Adam, used only for contrastive pretraining from scratch.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
