use std::collections::BTreeMap;

use super::{Gradients, NnError, ParameterSet, Tensor};

/// Learning rate and step index handed to the optimizer by a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub lr: f64,
    pub step: u64,
}

/// Adam without weight decay (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update. Every gradient must name an existing trainable
    /// parameter; frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients, point: SchedulePoint) -> Result<(), NnError> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
            if !params.is_trainable(name) {
                return Err(NnError::FrozenParameter(name.to_string()));
            }
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!("gradient shape for {name}")));
            }
            if !g.is_finite() {
                return Err(NnError::NonFinite(name.to_string()));
            }
        }
        for (name, g) in grads.iter() {
            let (m, v, t) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()), 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let p = params.get_mut(name).expect("checked above");
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= point.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
