//! Finite-difference verification of the analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::LossKind;
use super::trainer::{example_gradients, TrainExample};
use super::TrainError;
use crate::model::{Checkpoint, UniRes};
use crate::nn::{ParamId, Scalar};

/// Worst sampled discrepancy within one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub samples: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude among the samples.
    pub max_grad: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_at(model: &UniRes<f64>, ex: &TrainExample, kind: LossKind) -> Result<f64, TrainError> {
    Ok(example_gradients(model, ex, kind)?.0)
}

/// Compares the analytic gradient of `model` against central differences
/// taken on an `f64` copy of the same weights. Up to `per_group` scalars
/// are drawn from each group.
pub fn check_gradients<T: Scalar>(
    model: &UniRes<T>,
    ex: &TrainExample,
    kind: LossKind,
    per_group: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>, TrainError> {
    let (_, analytic) = example_gradients(model, ex, kind)?;
    let mut probe: UniRes<f64> = Checkpoint::from_model(model, None).to_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for group in model.params().groups() {
        let members: Vec<(ParamId, usize)> = model
            .params()
            .group_members(&group)
            .into_iter()
            .flat_map(|id| (0..model.params().value(id).len()).map(move |k| (id, k)))
            .collect();
        let n = per_group.min(members.len());
        let mut check = GroupCheck {
            group: group.clone(),
            samples: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_grad: 0.0,
        };
        for i in sample(&mut rng, members.len(), n) {
            let (id, k) = members[i];
            let original = probe.params().value(id).data()[k];
            probe.params_mut().value_mut(id).data_mut()[k] = original + step;
            let plus = loss_at(&probe, ex, kind)?;
            probe.params_mut().value_mut(id).data_mut()[k] = original - step;
            let minus = loss_at(&probe, ex, kind)?;
            probe.params_mut().value_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].data()[k].as_f64();
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric, floor));
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_grad = check.max_grad.max(a.abs());
        }
        out.push(check);
    }
    Ok(out)
}

/// Gradient norm of every parameter group after one backward pass.
pub fn group_grad_norms<T: Scalar>(
    model: &UniRes<T>,
    ex: &TrainExample,
    kind: LossKind,
) -> Result<Vec<(String, f64)>, TrainError> {
    let (_, grads) = example_gradients(model, ex, kind)?;
    Ok(model
        .params()
        .groups()
        .into_iter()
        .map(|group| {
            let sq: f64 = model
                .params()
                .group_members(&group)
                .into_iter()
                .flat_map(|id| grads[id.index()].data().iter().map(|v| v.as_f64().powi(2)))
                .sum();
            (group, sq.sqrt())
        })
        .collect())
}
