//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::diffcore::params::{ParamId, ParamSet};

/// Linear warmup to the base rate, then linear decay to zero at
/// `total_steps`. The multiplier at step 0 is 0; at `warmup_steps` it is 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Warmup covers the given fraction of the total step budget, rounded
    /// down, with at least one step when the budget allows.
    pub fn with_warmup_fraction(base_lr: f64, total_steps: usize, fraction: f64) -> Self {
        let warmup = ((total_steps as f64 * fraction) as usize).min(total_steps);
        LrSchedule {
            base_lr,
            warmup_steps: warmup,
            total_steps,
        }
    }

    pub fn constant(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let mult = if step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else if self.total_steps == self.warmup_steps {
            1.0
        } else {
            (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        };
        self.base_lr * mult
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    /// First/second moment buffers, parallel to the parameter list it serves.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ids: Vec<ParamId>,
}

impl AdamW {
    pub fn new(set: &ParamSet, ids: Vec<ParamId>, schedule: LrSchedule, weight_decay: f64) -> Self {
        let m = ids.iter().map(|&id| vec![0.0; set.get(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; set.get(id).numel()]).collect();
        AdamW {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
            ids,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Drop every parameter not in `keep`, preserving the moment buffers
    /// and step count of the survivors.
    pub fn retain(&mut self, keep: &std::collections::BTreeSet<ParamId>) {
        let mut ids = Vec::with_capacity(self.ids.len());
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for (slot, &id) in self.ids.iter().enumerate() {
            if keep.contains(&id) {
                ids.push(id);
                m.push(std::mem::take(&mut self.m[slot]));
                v.push(std::mem::take(&mut self.v[slot]));
            }
        }
        self.ids = ids;
        self.m = m;
        self.v = v;
    }

    /// Apply one update from the gradients currently stored in `set`, then
    /// advance the schedule. Decay is decoupled: it scales the weight
    /// directly by lr * wd, independent of the gradient moments.
    pub fn step(&mut self, set: &mut ParamSet) {
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (slot, &id) in self.ids.iter().enumerate() {
            let p = set.get_mut(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}
