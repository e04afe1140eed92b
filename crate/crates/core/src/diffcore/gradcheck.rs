//! Finite-difference verification of reverse-mode gradients.
//!
//! The oracle is the central difference (f(x+h) - f(x-h)) / 2h with
//! h = 1e-5. A coordinate passes when
//! |ad - fd| <= atol + rtol * max(|ad|, |fd|).

use crate::diffcore::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
pub const FD_ATOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub worst_abs_diff: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn within_tolerance(ad: f64, fd: f64) -> bool {
    (ad - fd).abs() <= FD_ATOL + FD_RTOL * ad.abs().max(fd.abs())
}

/// Compare analytic gradients against central differences for every
/// coordinate of the given parameters.
///
/// `loss` must evaluate the model from the current contents of `set` and
/// return a scalar; it is called 2 x numel times for the differences plus
/// once for the analytic pass, so keep the model small.
///
/// `grad` must run a full forward/backward and return the analytic gradient
/// for one parameter, reading weights from `set` without mutating them.
pub fn check_gradients(
    set: &mut ParamSet,
    ids: &[ParamId],
    mut loss: impl FnMut(&ParamSet) -> Result<f64>,
    mut grad: impl FnMut(&ParamSet, ParamId) -> Result<Vec<f64>>,
) -> Result<GradReport> {
    let mut report = GradReport {
        checked: 0,
        worst_abs_diff: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        failures: 0,
    };
    for &id in ids {
        let analytic = grad(set, id)?;
        let numel = set.get(id).numel();
        if analytic.len() != numel {
            return Err(Error::state(format!(
                "analytic gradient length {} does not match parameter {} ({} values)",
                analytic.len(),
                set.get(id).name,
                numel
            )));
        }
        for i in 0..numel {
            let orig = set.get(id).data[i];
            set.get_mut(id).data[i] = orig + FD_STEP;
            let up = loss(set)?;
            set.get_mut(id).data[i] = orig - FD_STEP;
            let down = loss(set)?;
            set.get_mut(id).data[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = analytic[i];
            let diff = (ad - fd).abs();
            report.checked += 1;
            if diff > report.worst_abs_diff {
                report.worst_abs_diff = diff;
                report.worst_param = set.get(id).name.clone();
                report.worst_index = i;
            }
            if !within_tolerance(ad, fd) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
