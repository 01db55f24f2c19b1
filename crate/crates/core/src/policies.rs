//! Non-learning alarm policies and the one-alarm-per-case evaluation loop.

use serde::{Deserialize, Serialize};

use crate::costmodel::{expected_cost, CostParameters};
use crate::metrics::{earliness, per_prefix_accuracy};
use crate::stream::{CaseRecord, PredictionPoint, PredictionStream};
use crate::{Error, Result};

/// Prefixes reached by fewer cases are not eligible as a static prediction point.
pub const MIN_STATIC_SUPPORT: usize = 30;

pub const DEFAULT_STATIC_THETA: f64 = 0.9;

/// Threshold above every attainable reliability: the policy never alarms.
pub const NEVER_ALARM_THRESHOLD: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlarmDecision {
    RaiseAlarm,
    Continue,
}

impl AlarmDecision {
    pub fn from_bool(alarm: bool) -> Self {
        if alarm {
            AlarmDecision::RaiseAlarm
        } else {
            AlarmDecision::Continue
        }
    }

    pub fn is_alarm(self) -> bool {
        self == AlarmDecision::RaiseAlarm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub alarm_prefix: Option<usize>,
    pub length: usize,
    pub deviation: bool,
    pub cost: f64,
    /// Alarm on a deviating case, or silence on a clean one.
    pub correct: bool,
}

impl CaseEvaluation {
    pub fn new(case: &CaseRecord, alarm_prefix: Option<usize>, params: &CostParameters) -> Result<Self> {
        let cost = expected_cost(case.deviation, alarm_prefix, case.length, params)?;
        Ok(CaseEvaluation {
            case_id: case.case_id.clone(),
            alarm_prefix,
            length: case.length,
            deviation: case.deviation,
            cost,
            correct: alarm_prefix.is_some() == case.deviation,
        })
    }
}

/// Aggregate behaviour of a policy over a list of evaluated cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub mean_cost: f64,
    /// Share of cases with an alarm.
    pub alarm_rate: f64,
    /// Share of alarms raised on deviating cases; 0 without alarms.
    pub accurate_alarm_rate: f64,
    /// Mean earliness of the raised alarms; 0 without alarms.
    pub mean_earliness: f64,
}

impl OutcomeSummary {
    pub fn from_evaluations(evals: &[CaseEvaluation]) -> Self {
        let n = evals.len().max(1) as f64;
        let mean_cost = evals.iter().map(|e| e.cost).sum::<f64>() / n;
        let alarmed: Vec<&CaseEvaluation> = evals.iter().filter(|e| e.alarm_prefix.is_some()).collect();
        let (accurate_alarm_rate, mean_earliness) = if alarmed.is_empty() {
            (0.0, 0.0)
        } else {
            let k = alarmed.len() as f64;
            let accurate = alarmed.iter().filter(|e| e.deviation).count() as f64 / k;
            let early = alarmed
                .iter()
                .map(|e| earliness(e.alarm_prefix.unwrap(), e.length).unwrap_or(0.0))
                .sum::<f64>()
                / k;
            (accurate, early)
        };
        OutcomeSummary {
            mean_cost,
            alarm_rate: alarmed.len() as f64 / n,
            accurate_alarm_rate,
            mean_earliness,
        }
    }
}

pub fn first_positive_decide(point: &PredictionPoint) -> AlarmDecision {
    AlarmDecision::from_bool(point.delta > 0.0)
}

pub fn threshold_decide(point: &PredictionPoint, threshold: f64) -> AlarmDecision {
    AlarmDecision::from_bool(point.delta > 0.0 && point.rho >= threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticPointConfig {
    /// Required fraction of the peak per-prefix MCC.
    pub theta: f64,
    /// Fixed prediction point `j*`.
    pub prefix: usize,
}

pub fn static_decide(point: &PredictionPoint, config: &StaticPointConfig) -> AlarmDecision {
    AlarmDecision::from_bool(point.j == config.prefix && point.delta > 0.0)
}

/// Earliest prefix whose accuracy reaches `theta` times the peak of the curve.
/// A non-positive peak falls back to the earliest maximiser.
pub fn select_static_point(curve: &[(usize, f64)], theta: f64) -> Option<usize> {
    let peak = curve.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return None;
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by_key(|&(j, _)| j);
    if peak > 0.0 {
        sorted.iter().find(|&&(_, m)| m >= theta * peak).map(|&(j, _)| j)
    } else {
        sorted.iter().find(|&&(_, m)| m == peak).map(|&(j, _)| j)
    }
}

pub fn fit_static_point(stream: &PredictionStream, theta: f64) -> Result<StaticPointConfig> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Config(format!(
            "static-point theta {theta} outside (0, 1]"
        )));
    }
    let candidates: Vec<(usize, f64)> = per_prefix_accuracy(stream)
        .into_iter()
        .filter(|(_, acc)| acc.support >= MIN_STATIC_SUPPORT && !acc.counts.is_degenerate())
        .map(|(j, acc)| (j, acc.mcc))
        .collect();
    let prefix = select_static_point(&candidates, theta).ok_or_else(|| {
        Error::Fit(format!(
            "no prefix reached by at least {MIN_STATIC_SUPPORT} cases has a defined MCC"
        ))
    })?;
    Ok(StaticPointConfig { theta, prefix })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedThreshold {
    pub threshold: f64,
    /// Mean expected cost of the threshold on the fitting stream.
    pub training_cost: f64,
}

impl FittedThreshold {
    pub fn never_alarms(&self) -> bool {
        self.threshold > 1.0
    }
}

/// Candidate thresholds: every distinct reliability of the stream plus 0.5
/// and the never-alarm sentinel, ascending.
pub fn threshold_candidates(stream: &PredictionStream) -> Vec<f64> {
    let mut candidates: Vec<f64> = stream
        .cases()
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.rho))
        .chain([0.5, NEVER_ALARM_THRESHOLD])
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates
}

/// Alarm prefix of a threshold policy on one case, precomputed as a staircase:
/// `steps[k] = (r_k, j_k)` with strictly increasing running maxima `r_k` of
/// the reliabilities of positive predictions. Threshold `t` alarms at the
/// first step with `r_k >= t`.
struct ThresholdStaircase {
    steps: Vec<(f64, usize)>,
    step_costs: Vec<f64>,
    silent_cost: f64,
}

impl ThresholdStaircase {
    fn build(case: &CaseRecord, params: &CostParameters) -> Result<Self> {
        let mut steps: Vec<(f64, usize)> = Vec::new();
        for p in case.points.iter().filter(|p| p.delta > 0.0) {
            if steps.last().is_none_or(|&(r, _)| p.rho > r) {
                steps.push((p.rho, p.j));
            }
        }
        let step_costs = steps
            .iter()
            .map(|&(_, j)| expected_cost(case.deviation, Some(j), case.length, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(ThresholdStaircase {
            steps,
            step_costs,
            silent_cost: expected_cost(case.deviation, None, case.length, params)?,
        })
    }

    fn cost(&self, threshold: f64) -> f64 {
        let k = self.steps.partition_point(|&(r, _)| r < threshold);
        self.step_costs.get(k).copied().unwrap_or(self.silent_cost)
    }
}

/// Picks the reliability threshold with the lowest mean expected cost on the
/// fitting stream. Ties go to the smaller threshold.
pub fn fit_threshold(stream: &PredictionStream, params: &CostParameters) -> Result<FittedThreshold> {
    let staircases = stream
        .cases()
        .iter()
        .map(|c| ThresholdStaircase::build(c, params))
        .collect::<Result<Vec<_>>>()?;
    let n = staircases.len() as f64;
    let mut best: Option<FittedThreshold> = None;
    for t in threshold_candidates(stream) {
        let mut total = 0.0;
        for s in &staircases {
            total += s.cost(t);
        }
        let mean = total / n;
        if best.is_none_or(|b| mean < b.training_cost) {
            best = Some(FittedThreshold {
                threshold: t,
                training_cost: mean,
            });
        }
    }
    best.ok_or(Error::EmptyStream)
}

/// Runs a per-point decision rule over every case, stopping a case at its
/// first alarm, and charges each case under `params`.
pub fn evaluate_policy<F>(
    stream: &PredictionStream,
    params: &CostParameters,
    mut decide: F,
) -> Vec<CaseEvaluation>
where
    F: FnMut(&PredictionPoint) -> AlarmDecision,
{
    stream
        .cases()
        .iter()
        .map(|case| {
            let alarm = case.points.iter().find(|p| decide(p).is_alarm()).map(|p| p.j);
            CaseEvaluation::new(case, alarm, params).expect("alarm prefix lies within the case")
        })
        .collect()
}
