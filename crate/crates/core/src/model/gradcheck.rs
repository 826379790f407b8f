//! Gradient check of a whole network, reported per parameter group.

use rand_chacha::ChaCha8Rng;

use super::{loss, param_group, CsranModel};
use crate::data::Batch;
use crate::error::Result;
use crate::tensor::{grad_check_steps, Fault};

/// Parameter groups in network order.
pub const GRADIENT_GROUPS: [&str; 6] = ["embedding", "highway", "encoder", "cafe", "aggregation", "prediction"];

/// Worst gradient error within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub params: usize,
    pub elements: usize,
    pub kinks: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Step ladder for the extrapolated central differences. Large steps keep
/// rounding small for gradients under the 1e-8 floor; the small ones
/// resolve strongly curved elements and those near a kink.
pub const GRADIENT_STEPS: [f64; 8] = [2e-2, 1e-2, 4e-3, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4];

/// Tolerance for a group. Groups upstream of the co-stack max see a
/// piecewise function and are held to 1e-3; the smooth aggregation and
/// prediction groups to 1e-5.
pub fn group_tolerance(group: &str) -> f64 {
    match group {
        "aggregation" | "prediction" => 1e-5,
        _ => 1e-3,
    }
}

/// Runs [`grad_check_steps`] with [`GRADIENT_STEPS`] over every parameter of `model` on `batch` with
/// dropout off. `fault` corrupts one backward rule (a negative control).
/// Groups without parameters are left out.
pub fn check_gradients(model: &mut CsranModel<f64>, batch: &Batch, fault: Option<Fault>) -> Result<Vec<GroupCheck>> {
    let net = model.net.clone();
    let mut out = Vec::new();
    for group in GRADIENT_GROUPS {
        let ids: Vec<_> = model
            .params
            .iter()
            .filter(|(_, p)| param_group(&p.name) == group)
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            continue;
        }
        let tolerance = group_tolerance(group);
        let report = grad_check_steps(&mut model.params, &ids, &GRADIENT_STEPS, |g| {
            g.set_fault(fault);
            let fwd = net.forward::<f64, ChaCha8Rng>(g, batch, None)?;
            loss(g, fwd.logits, &batch.labels)
        })?;
        let worst = report
            .params
            .iter()
            .fold(None, |w: Option<&crate::tensor::ParamCheck>, p| match w {
                Some(w) if w.max_relative_error >= p.max_relative_error => Some(w),
                _ => Some(p),
            })
            .expect("group has parameters");
        out.push(GroupCheck {
            group,
            params: report.params.len(),
            elements: report.params.iter().map(|p| p.elements).sum(),
            kinks: report.params.iter().map(|p| p.kinks).sum(),
            max_relative_error: worst.max_relative_error,
            worst_param: worst.name.clone(),
            tolerance,
        });
    }
    Ok(out)
}
