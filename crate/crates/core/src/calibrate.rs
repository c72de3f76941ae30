//! Accuracy under an exit policy and RAD-based threshold calibration.

use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ConfidenceVector, ExitPolicy, MultiExitModel};

/// `T_c` candidates 0.500, 0.505, ..., 1.000.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|k| (500 + 5 * k) as f64 / 1000.0).collect()
}

/// Fraction of samples whose early-exit prediction equals the label.
pub fn accuracy(model: &MultiExitModel, data: &Dataset, policy: &ExitPolicy) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        let trace = model.early_exit_infer(&data.tensor(i), policy)?;
        if trace.predicted_label == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `(acc_full - acc) / acc_full`, zero when the full model is never right.
pub fn relative_accuracy_drop(acc_full: f64, acc: f64) -> f64 {
    if acc_full > 0.0 {
        (acc_full - acc) / acc_full
    } else {
        0.0
    }
}

/// Every exit's confidences for every sample, computed once so a threshold
/// sweep does not rerun the network.
pub struct ExitTable {
    pub confidences: Vec<Vec<ConfidenceVector>>,
    pub labels: Vec<usize>,
}

impl ExitTable {
    pub fn build(model: &MultiExitModel, data: &Dataset) -> Result<Self> {
        let confidences = (0..data.len())
            .map(|i| model.forward_all_exits(&data.tensor(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            confidences,
            labels: data.labels.clone(),
        })
    }

    /// Accuracy of the last exit alone.
    pub fn full_accuracy(&self) -> f64 {
        self.accuracy(&ExitPolicy::never_early())
    }

    pub fn accuracy(&self, policy: &ExitPolicy) -> f64 {
        let correct = self
            .confidences
            .iter()
            .zip(&self.labels)
            .filter(|(exits, &label)| {
                let last = exits.len() - 1;
                let taken = exits[..last]
                    .iter()
                    .find(|c| policy.accepts(c.max()))
                    .unwrap_or(&exits[last]);
                taken.argmax() == label
            })
            .count();
        correct as f64 / self.labels.len().max(1) as f64
    }

    pub fn rad(&self, policy: &ExitPolicy) -> f64 {
        relative_accuracy_drop(self.full_accuracy(), self.accuracy(policy))
    }
}

/// Smallest grid `T_c` whose relative accuracy drop is within `rad_target`,
/// or [`ExitPolicy::never_early`] when none qualifies.
pub fn calibrate_threshold(model: &MultiExitModel, val: &Dataset, rad_target: f64) -> Result<ExitPolicy> {
    if !(0.0..1.0).contains(&rad_target) {
        return Err(Error::InvalidConfig(alloc::format!(
            "RAD target must be in [0, 1), got {rad_target}"
        )));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let table = ExitTable::build(model, val)?;
    Ok(calibrate_from_table(&table, rad_target))
}

pub fn calibrate_from_table(table: &ExitTable, rad_target: f64) -> ExitPolicy {
    let full = table.full_accuracy();
    threshold_grid()
        .into_iter()
        .map(|t| ExitPolicy::confidence(t).expect("grid values are valid"))
        .find(|p| relative_accuracy_drop(full, table.accuracy(p)) <= rad_target)
        .unwrap_or_else(ExitPolicy::never_early)
        .with_rad_target(rad_target)
}
