//! Inference-cost measurement, EEC curves and ownership verdicts.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::AdversarialSample;
use crate::model::{ExitPolicy, MultiExitModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimingBackend {
    /// Cumulative multiply-accumulate count up to the exit taken.
    #[default]
    CostModel,
    WallClock { repeats: usize, warmup_runs: usize },
}

impl TimingBackend {
    pub const fn wall_clock() -> Self {
        TimingBackend::WallClock {
            repeats: 10,
            warmup_runs: 3,
        }
    }
}


impl fmt::Display for TimingBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimingBackend::CostModel => f.write_str("cost-model"),
            TimingBackend::WallClock { repeats, warmup_runs } => {
                write!(f, "wall-clock(repeats={repeats}, warmup={warmup_runs})")
            }
        }
    }
}

/// Produces one raw inference cost per sample.
pub trait Meter {
    fn backend(&self) -> TimingBackend;

    fn measure(&mut self, model: &MultiExitModel, samples: &[Tensor<f32>], policy: &ExitPolicy) -> Result<Vec<f64>>;
}

/// Deterministic meter reading [`crate::ExitTrace::cost`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CostModel;

impl Meter for CostModel {
    fn backend(&self) -> TimingBackend {
        TimingBackend::CostModel
    }

    fn measure(&mut self, model: &MultiExitModel, samples: &[Tensor<f32>], policy: &ExitPolicy) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|x| model.early_exit_infer(x, policy).map(|t| t.cost as f64))
            .collect()
    }
}

/// Empirical CDF of normalized times, as a polyline whose trapezoidal
/// integral equals the step-function integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EECCurve {
    pub points: Vec<(f64, f64)>,
    pub t_max: f64,
    pub times: Vec<f64>,
}

impl EECCurve {
    /// Fraction of samples finished by normalized time `t`.
    pub fn fraction_at(&self, t: f64) -> f64 {
        self.times.iter().filter(|&&v| v <= t).count() as f64 / self.times.len() as f64
    }
}

/// `t_k = min(raw_k / t_max, 1)` and their empirical CDF.
pub fn eec_curve(raw_costs: &[f64], t_max: f64) -> Result<EECCurve> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!("t_max must be positive, got {t_max}")));
    }
    if raw_costs.is_empty() {
        return Err(Error::Empty("raw costs"));
    }
    let times: Vec<f64> = raw_costs.iter().map(|&r| (r / t_max).clamp(0.0, 1.0)).collect();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut points = alloc::vec![(0.0, 0.0)];
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i];
        let before = i as f64 / n;
        while i < sorted.len() && sorted[i] == t {
            i += 1;
        }
        points.push((t, before));
        points.push((t, i as f64 / n));
    }
    if points.last().map(|p| p.0) != Some(1.0) {
        points.push((1.0, 1.0));
    }
    Ok(EECCurve { points, t_max, times })
}

/// Trapezoidal area under the curve over [0, 1].
pub fn eec_auc(curve: &EECCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Stolen,
    Independent,
}

impl Verdict {
    pub fn from_scores(t_n: f64, t_f: f64) -> Self {
        if t_n < t_f {
            Verdict::Stolen
        } else {
            Verdict::Independent
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stolen => "STOLEN",
            Verdict::Independent => "INDEPENDENT",
        })
    }
}

/// Benign-sample EEC AUC and the `t_max` it establishes for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignCalibration {
    pub auc: f64,
    pub t_max: f64,
    pub curve: EECCurve,
}

pub fn benign_eec_auc<M: Meter + ?Sized>(
    model: &MultiExitModel,
    benign: &[Tensor<f32>],
    policy: &ExitPolicy,
    meter: &mut M,
) -> Result<BenignCalibration> {
    if benign.is_empty() {
        return Err(Error::Empty("benign calibration set"));
    }
    let raw = meter.measure(model, benign, policy)?;
    let t_max = raw.iter().copied().fold(0.0, f64::max);
    let curve = eec_curve(&raw, t_max)?;
    Ok(BenignCalibration {
        auc: eec_auc(&curve),
        t_max,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub model_id: String,
    pub backend: TimingBackend,
    pub t_n: f64,
    pub t_f: f64,
    pub verdict: Verdict,
    pub n: usize,
    pub t_max: f64,
    pub benign_auc: f64,
    pub normalized_times: Vec<f64>,
    pub curve: EECCurve,
}

/// Measures the fingerprints on `model`, normalizes by the benign `t_max`
/// of the same model and compares the EEC AUC with `t_f`.
pub fn verify_ip<M: Meter + ?Sized>(
    model: &MultiExitModel,
    model_id: &str,
    fingerprints: &[Tensor<f32>],
    policy: &ExitPolicy,
    meter: &mut M,
    t_f: f64,
    calibration: Option<&BenignCalibration>,
) -> Result<VerificationReport> {
    let cal = calibration.ok_or(Error::MissingCalibration("t_max of the suspect model"))?;
    if fingerprints.is_empty() {
        return Err(Error::Empty("fingerprint set"));
    }
    let raw = meter.measure(model, fingerprints, policy)?;
    let curve = eec_curve(&raw, cal.t_max)?;
    let t_n = eec_auc(&curve);
    Ok(VerificationReport {
        model_id: model_id.into(),
        backend: meter.backend(),
        t_n,
        t_f,
        verdict: Verdict::from_scores(t_n, t_f),
        n: fingerprints.len(),
        t_max: cal.t_max,
        benign_auc: cal.auc,
        normalized_times: curve.times.clone(),
        curve,
    })
}

/// Fraction of reports with a STOLEN verdict.
pub fn ip_verified_rate(reports: &[VerificationReport]) -> Result<f64> {
    let verdicts: Vec<Verdict> = reports.iter().map(|r| r.verdict).collect();
    verified_rate(&verdicts)
}

pub fn verified_rate(verdicts: &[Verdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::Empty("model list"));
    }
    Ok(verdicts.iter().filter(|&&v| v == Verdict::Stolen).count() as f64 / verdicts.len() as f64)
}

/// Probability that a stolen score is below an independent one, ties
/// counting one half.
pub fn roc_auc(stolen: &[f64], independent: &[f64]) -> Result<f64> {
    if stolen.is_empty() || independent.is_empty() {
        return Err(Error::Empty("score list"));
    }
    let mut ind = independent.to_vec();
    ind.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in stolen {
        let below = ind.partition_point(|&v| v <= s);
        let strictly_below = ind.partition_point(|&v| v < s);
        let ties = below - strictly_below;
        wins += (ind.len() - below) as f64 + 0.5 * ties as f64;
    }
    Ok(wins / (stolen.len() * ind.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub model_id: String,
    pub match_rate: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Label-match rate of adversarial samples; STOLEN iff above `threshold`.
pub fn baseline_verify(
    model: &MultiExitModel,
    model_id: &str,
    set: &[AdversarialSample],
    policy: &ExitPolicy,
    threshold: f64,
) -> Result<BaselineReport> {
    if set.is_empty() {
        return Err(Error::Empty("adversarial set"));
    }
    let shape = model.input_shape();
    let mut hits = 0usize;
    for s in set {
        let t = model.early_exit_infer(&Tensor::from_vec(shape, s.x_adv.clone()), policy)?;
        if t.predicted_label == s.target_label {
            hits += 1;
        }
    }
    let match_rate = hits as f64 / set.len() as f64;
    Ok(BaselineReport {
        model_id: model_id.into(),
        match_rate,
        threshold,
        verdict: if match_rate > threshold {
            Verdict::Stolen
        } else {
            Verdict::Independent
        },
    })
}

/// Midpoint between the target's own `T_N` and the smallest independent
/// `T_N`.
pub fn select_t_f(target_t_n: f64, independent_t_n: &[f64]) -> Result<f64> {
    let min = independent_t_n
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or(Error::Empty("independent scores"))?;
    Ok(((target_t_n + min) / 2.0).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub architecture: String,
    pub dataset: String,
    pub rad: f64,
    pub t_f: f64,
}

/// `T_f` per (architecture, dataset, RAD level).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn insert(&mut self, architecture: &str, dataset: &str, rad: f64, t_f: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t_f) {
            return Err(Error::InvalidThreshold(alloc::format!("T_f {t_f} outside [0, 1]")));
        }
        self.entries
            .retain(|e| !(e.architecture == architecture && e.dataset == dataset && e.rad == rad));
        self.entries.push(ThresholdEntry {
            architecture: architecture.into(),
            dataset: dataset.into(),
            rad,
            t_f,
        });
        Ok(())
    }

    pub fn get(&self, architecture: &str, dataset: &str, rad: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.architecture == architecture && e.dataset == dataset && e.rad == rad)
            .map(|e| e.t_f)
    }
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t_f: f64,
    pub independent_rate: f64,
    pub stolen_rate: f64,
}

pub fn ablation_rows(independent: &[f64], stolen: &[f64], candidates: &[f64]) -> Result<Vec<AblationRow>> {
    let rate = |scores: &[f64], t_f: f64| -> Result<f64> {
        let v: Vec<Verdict> = scores.iter().map(|&s| Verdict::from_scores(s, t_f)).collect();
        verified_rate(&v)
    };
    candidates
        .iter()
        .map(|&t_f| {
            Ok(AblationRow {
                t_f,
                independent_rate: rate(independent, t_f)?,
                stolen_rate: rate(stolen, t_f)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_step_at_quarter() {
        let mut raw = alloc::vec![25.0; 50];
        raw.extend([100.0; 50]);
        let c = eec_curve(&raw, 100.0).unwrap();
        assert_eq!(c.fraction_at(0.2), 0.0);
        assert_eq!(c.fraction_at(0.25), 0.5);
        assert_eq!(c.fraction_at(0.99), 0.5);
        assert_eq!(c.fraction_at(1.0), 1.0);
        assert!((eec_auc(&c) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn boundary_curves() {
        let all_max = eec_curve(&[7.0, 7.0, 9.0], 7.0).unwrap();
        assert_eq!(eec_auc(&all_max), 0.0);
        assert_eq!(*all_max.points.last().unwrap(), (1.0, 1.0));
        let all_zero = eec_curve(&[0.0, 0.0], 3.0).unwrap();
        assert_eq!(eec_auc(&all_zero), 1.0);
        assert!(eec_curve(&[1.0], 0.0).is_err());
        assert!(eec_curve(&[], 1.0).is_err());
    }

    #[test]
    fn verdict_boundary() {
        assert_eq!(Verdict::from_scores(0.0, 0.0), Verdict::Independent);
        assert_eq!(Verdict::from_scores(0.1, 0.2), Verdict::Stolen);
    }

    #[test]
    fn roc_extremes() {
        assert_eq!(roc_auc(&[0.0, 0.1], &[0.5, 0.6]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.5);
        assert!(roc_auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn t_f_midpoint() {
        assert!((select_t_f(0.0, &[0.4, 0.3]).unwrap() - 0.15).abs() < 1e-15);
        let mut table = ThresholdTable::default();
        table.insert("net", "set", 0.05, 0.15).unwrap();
        assert_eq!(table.get("net", "set", 0.05), Some(0.15));
        assert!(table.insert("net", "set", 0.05, 1.5).is_err());
    }
}
