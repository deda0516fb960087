use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
///
/// Moments are created lazily the first time a parameter receives a gradient
/// and bias correction uses that parameter's own update count, so parameters
/// that only see some batches (per-subject modules) are corrected properly.
/// Parameters without a gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    moments: Vec<Option<Moment>>,
}

#[derive(Clone, Debug)]
struct Moment {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        let list = grads.params();
        for (id, g) in &list {
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", store.name(*id))));
            }
        }
        self.step += 1;
        for (id, g) in list {
            self.update(store, id, g.data())?;
        }
        Ok(())
    }

    /// Update of a single parameter with an explicit gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, id: ParamId, g: &[f32]) -> Result<()> {
        let p = store.get_mut(id);
        if p.numel() != g.len() {
            return Err(Error::Dimension(format!("gradient length {} for {} values", g.len(), p.numel())));
        }
        if self.moments.len() < id.index() + 1 {
            self.moments.resize(id.index() + 1, None);
        }
        let mo = self.moments[id.index()].get_or_insert_with(|| Moment {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            t: 0,
        });
        mo.t += 1;
        let bc1 = 1.0 - self.beta1.powi(mo.t);
        let bc2 = 1.0 - self.beta2.powi(mo.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((pv, &gv), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *pv = *pv * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
