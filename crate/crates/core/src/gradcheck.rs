//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::TripletRecord;
use crate::error::Result;
use crate::model::{CirModel, LossOptions, GROUPS};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|)`, with the denominator clamped at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroupStatus {
    Passed { max_rel_error: f64, entries: usize },
    Failed { max_rel_error: f64, entries: usize },
    SkippedFrozen,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: String,
    #[serde(flatten)]
    pub status: GroupStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self
            .groups
            .iter()
            .any(|g| matches!(g.status, GroupStatus::Failed { .. }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>14}  status\n",
            "group", "entries", "max rel err"
        );
        for g in &self.groups {
            let line = match &g.status {
                GroupStatus::Passed {
                    max_rel_error,
                    entries,
                } => format!(
                    "{:<16} {entries:>8} {max_rel_error:>14.3e}  pass\n",
                    g.group
                ),
                GroupStatus::Failed {
                    max_rel_error,
                    entries,
                } => format!(
                    "{:<16} {entries:>8} {max_rel_error:>14.3e}  FAIL\n",
                    g.group
                ),
                GroupStatus::SkippedFrozen => {
                    format!("{:<16} {:>8} {:>14}  skipped (frozen)\n", g.group, "-", "-")
                }
            };
            out.push_str(&line);
        }
        out
    }
}

/// Options for [`check_model`].
#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// Test hook: perturb the analytic gradient of this group before
    /// comparison.
    pub corrupt_group: Option<String>,
}

fn loss_value(model: &CirModel, batch: &[&TripletRecord], opts: &LossOptions) -> Result<f64> {
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, batch, opts)?;
    Ok(g.value(l.total).item())
}

/// Compares every parameter gradient of the joint loss on `batch` against
/// central finite differences, grouped by component.
pub fn check_model(
    model: &mut CirModel,
    batch: &[&TripletRecord],
    opts: &LossOptions,
    options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    model.store.zero_grads();
    model.accumulate_gradients(batch, opts)?;

    let mut groups = Vec::with_capacity(GROUPS.len());
    for group in GROUPS {
        let ids = model.group_ids(group);
        if ids.iter().all(|&id| model.store.is_frozen(id)) {
            groups.push(GroupReport {
                group: group.to_string(),
                status: GroupStatus::SkippedFrozen,
            });
            continue;
        }
        let mut worst = 0.0f64;
        let mut entries = 0;
        for id in ids {
            if model.store.is_frozen(id) {
                continue;
            }
            let mut analytic = model.store.grad(id).clone();
            if options.corrupt_group.as_deref() == Some(group) {
                analytic
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = *v * 1.01 + 1e-3);
            }
            let original = model.store.get(id).value.clone();
            let numeric = numeric_gradient(
                |probe| {
                    model.store.get_mut(id).value = probe.clone();
                    loss_value(model, batch, opts)
                },
                &original,
                FD_STEP,
            );
            model.store.get_mut(id).value = original;
            let numeric = numeric?;
            worst = worst.max(max_relative_error(&analytic, &numeric));
            entries += analytic.len();
        }
        let status = if worst < REL_TOL {
            GroupStatus::Passed {
                max_rel_error: worst,
                entries,
            }
        } else {
            GroupStatus::Failed {
                max_rel_error: worst,
                entries,
            }
        };
        groups.push(GroupReport {
            group: group.to_string(),
            status,
        });
    }
    model.store.zero_grads();
    Ok(GradcheckReport {
        groups,
        tolerance: REL_TOL,
    })
}
