//! Adam with bias correction, applied jointly to the frontend and
//! classifier parameters, followed by the frontend constraint clamps.

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelState};
use crate::real::{r, Real};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter group, aligned
/// with the model's parameter-slot order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    names: Vec<String>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &mut ModelState<T>) -> Self {
        let slots = model.param_slots_mut();
        AdamState {
            names: slots.iter().map(|s| s.name.clone()).collect(),
            m: slots.iter().map(|s| vec![T::zero(); s.values.len()]).collect(),
            v: slots.iter().map(|s| vec![T::zero(); s.values.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter group, then the post-step clamps
/// that keep the frontend parameters in their legal ranges. Non-finite
/// gradients abort with the offending group named.
pub fn adam_step<T: Real>(
    model: &mut ModelState<T>,
    grads: &ModelGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let gslots = grads.slots();
    let mut pslots = model.param_slots_mut();
    if gslots.len() != pslots.len() {
        return Err(Error::Config(format!(
            "gradient has {} groups, model has {}",
            gslots.len(),
            pslots.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let lr = r::<T>(cfg.lr);
    let b1 = r::<T>(cfg.beta1);
    let b2 = r::<T>(cfg.beta2);
    let eps = r::<T>(cfg.eps);
    let bc1 = T::one() - r::<T>(cfg.beta1.powi(t as i32));
    let bc2 = T::one() - r::<T>(cfg.beta2.powi(t as i32));

    for (gi, ((name, gvals), slot)) in gslots.iter().zip(pslots.iter_mut()).enumerate() {
        if state.names[gi] != slot.name {
            return Err(Error::Config(format!(
                "optimizer state group {} does not match model group {}",
                state.names[gi], slot.name
            )));
        }
        if *name != slot.name || gvals.len() != slot.values.len() {
            return Err(Error::Config(format!(
                "gradient group {gi} ({name}, {} values) does not match parameter group {} ({} values)",
                gvals.len(),
                slot.name,
                slot.values.len()
            )));
        }
        for &g in gvals.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in group {name} at optimizer step {t}"
                )));
            }
        }
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        for i in 0..gvals.len() {
            let g = gvals[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            slot.values[i] = slot.values[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        if let Some((lo, hi)) = slot.clamp {
            for p in slot.values.iter_mut() {
                *p = (*p).max(lo).min(hi);
            }
        }
    }
    Ok(())
}
