//! Central finite-difference check of the pretraining gradient.

use ndarray::ArrayView2;

use super::{clip_gradient, clip_objective, ClipPlan};
use crate::error::Result;
use crate::model::EncoderModel;
use crate::params::Parameterized;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    /// Largest element-wise `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the analytic gradient of the clip's mean contrastive loss with
/// central differences, element by element, for every named parameter.
pub fn check_gradients(
    model: &EncoderModel<f64>,
    mel: ArrayView2<f64>,
    plan: &ClipPlan,
    temperature: f64,
    step: f64,
    floor: f64,
) -> Result<Vec<GroupCheck>> {
    let m = plan.mask.masked.len() as f64;
    let mut grad = model.zeros_like();
    clip_gradient(model, mel, plan, temperature, 1.0 / m, &mut grad)?;
    let analytic: Vec<(String, Vec<f64>)> = grad.params().into_iter().map(|(n, g)| (n, g.to_vec())).collect();

    let objective = |m: &EncoderModel<f64>| clip_objective(m, mel, plan, temperature).map(|l| l.loss);
    let mut out = Vec::with_capacity(analytic.len());
    for (group, (name, a)) in analytic.iter().enumerate() {
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        for (i, &ai) in a.iter().enumerate() {
            let mut probe = model.clone();
            let orig = probe.params()[group].1[i];
            probe.params_mut()[group].1[i] = orig + step;
            let plus = objective(&probe)?;
            probe.params_mut()[group].1[i] = orig - step;
            let minus = objective(&probe)?;
            let ni = (plus - minus) / (2.0 * step);
            let abs = (ai - ni).abs();
            worst_abs = worst_abs.max(abs);
            worst_rel = worst_rel.max(abs / ai.abs().max(ni.abs()).max(floor));
        }
        out.push(GroupCheck {
            name: name.clone(),
            numel: a.len(),
            max_rel_error: worst_rel,
            max_abs_error: worst_abs,
        });
    }
    Ok(out)
}
