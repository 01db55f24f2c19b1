//! Accuracy, drift and outcome metrics.

use std::collections::{BTreeMap, VecDeque};

use crate::stream::PredictionStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ContingencyCounts {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// True when one of the MCC denominator factors is zero.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp == 0 || self.tp + self.fn_ == 0 || self.tn + self.fp == 0 || self.tn + self.fn_ == 0
    }
}

/// Matthews correlation coefficient; 0 when the denominator vanishes.
pub fn mcc(counts: &ContingencyCounts) -> f64 {
    if counts.is_degenerate() {
        return 0.0;
    }
    let (tp, fp, tn, fn_) = (
        counts.tp as f64,
        counts.fp as f64,
        counts.tn as f64,
        counts.fn_ as f64,
    );
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
}

/// Mean absolute error of a case's predictions against its actual outcome.
pub fn mae(predictions: &[f64], y: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("MAE of an empty prediction list"));
    }
    Ok(predictions.iter().map(|p| (p - y).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Relative savings of a policy's mean cost against never adapting.
pub fn cost_savings(c_never: f64, c_x: f64) -> Result<f64> {
    if !(c_never > 0.0) {
        return Err(Error::domain(format!(
            "relative savings undefined for never-adapt cost {c_never}"
        )));
    }
    Ok((c_never - c_x) / c_never)
}

/// 1 for an alarm at the first prefix, 0 for an alarm at the last.
pub fn earliness(alarm_prefix: usize, l: usize) -> Result<f64> {
    if alarm_prefix < 1 || alarm_prefix > l {
        return Err(Error::domain(format!(
            "alarm prefix {alarm_prefix} outside 1..={l}"
        )));
    }
    if l == 1 {
        return Ok(1.0);
    }
    Ok(1.0 - (alarm_prefix - 1) as f64 / (l - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixAccuracy {
    pub mcc: f64,
    /// Number of cases that reach this prefix.
    pub support: usize,
    pub counts: ContingencyCounts,
}

/// MCC of the sign prediction `delta > 0` at every prefix length reached by
/// at least one case.
pub fn per_prefix_accuracy(stream: &PredictionStream) -> BTreeMap<usize, PrefixAccuracy> {
    let mut counts: BTreeMap<usize, ContingencyCounts> = BTreeMap::new();
    for case in stream.cases() {
        for p in &case.points {
            counts
                .entry(p.j)
                .or_default()
                .record(p.predicts_deviation(), case.deviation);
        }
    }
    counts
        .into_iter()
        .map(|(j, c)| {
            (
                j,
                PrefixAccuracy {
                    mcc: mcc(&c),
                    support: c.total() as usize,
                    counts: c,
                },
            )
        })
        .collect()
}

/// Per-case MAE in arrival order (0-based index), with predictions recovered
/// as `y_hat = A * (1 + delta)`.
pub fn per_case_mae_series(stream: &PredictionStream) -> Vec<(usize, f64)> {
    let a = stream.expected_outcome();
    stream
        .cases()
        .iter()
        .enumerate()
        .map(|(idx, case)| {
            let preds: Vec<f64> = case.points.iter().map(|p| a * (1.0 + p.delta)).collect();
            (
                idx,
                mae(&preds, case.outcome).expect("validated cases have points"),
            )
        })
        .collect()
}

/// Fixed-capacity window over the most recent values.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingWindow {
    capacity: usize,
    values: VecDeque<f64>,
}

impl RollingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "rolling window needs a positive capacity");
        RollingWindow {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Mean of the window; `None` while empty.
    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::CaseRecord;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ContingencyCounts {
        ContingencyCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&counts(5, 0, 5, 0)), 1.0);
        assert_eq!(mcc(&counts(1, 1, 1, 1)), 0.0);
        assert_eq!(mcc(&counts(0, 5, 0, 5)), -1.0);
        assert_eq!(mcc(&counts(3, 0, 0, 0)), 0.0);
    }

    #[test]
    fn mae_examples() {
        assert!((mae(&[0.2, 0.4, 0.9], 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(mae(&[0.3, 0.3, 0.3], 0.3).unwrap(), 0.0);
        assert_eq!(mae(&[0.0], 1.0).unwrap(), 1.0);
        assert!(mae(&[], 1.0).is_err());
    }

    #[test]
    fn savings_examples() {
        assert!((cost_savings(100.0, 66.0).unwrap() - 0.34).abs() < 1e-12);
        assert_eq!(cost_savings(100.0, 100.0).unwrap(), 0.0);
        assert!((cost_savings(100.0, 120.0).unwrap() + 0.2).abs() < 1e-12);
        assert!(cost_savings(0.0, 10.0).is_err());
    }

    #[test]
    fn earliness_examples() {
        assert_eq!(earliness(1, 10).unwrap(), 1.0);
        assert_eq!(earliness(10, 10).unwrap(), 0.0);
        assert_eq!(earliness(3, 5).unwrap(), 0.5);
        assert_eq!(earliness(1, 1).unwrap(), 1.0);
        assert!(earliness(6, 5).is_err());
    }

    fn stream_from(signs: &[(Vec<f64>, bool)]) -> PredictionStream {
        let cases = signs
            .iter()
            .enumerate()
            .map(|(i, (deltas, dev))| {
                let preds: Vec<(f64, f64)> = deltas.iter().map(|&d| (d, 1.0)).collect();
                CaseRecord::from_predictions(format!("c{i}"), &preds, if *dev { 1.0 } else { 0.0 }, *dev)
                    .unwrap()
            })
            .collect();
        PredictionStream::new(cases, 0.5).unwrap()
    }

    #[test]
    fn prefix_accuracy_oracle_and_inverted() {
        let oracle = stream_from(&[
            (vec![1.0, 1.0, 1.0], true),
            (vec![-1.0, -1.0], false),
            (vec![1.0, 1.0], true),
            (vec![-1.0, -1.0, -1.0], false),
        ]);
        let acc = per_prefix_accuracy(&oracle);
        assert_eq!(acc.len(), 3);
        assert!(acc.values().all(|a| a.mcc == 1.0));
        assert_eq!(acc[&3].support, 2);
        assert!(!acc.contains_key(&4));

        let inverted = stream_from(&[(vec![-1.0, -1.0], true), (vec![1.0, 1.0], false)]);
        assert!(per_prefix_accuracy(&inverted).values().all(|a| a.mcc == -1.0));
    }

    #[test]
    fn mae_series() {
        let s = stream_from(&[(vec![1.0, 1.0], true), (vec![-1.0], false)]);
        assert_eq!(per_case_mae_series(&s), vec![(0, 0.0), (1, 0.0)]);
        let single = stream_from(&[(vec![-1.0], true)]);
        assert_eq!(per_case_mae_series(&single), vec![(0, 1.0)]);
    }

    #[test]
    fn rolling_window_evicts_oldest() {
        let mut w = RollingWindow::new(3);
        assert_eq!(w.mean(), None);
        for v in [1.0, 2.0, 3.0, 4.0] {
            w.push(v);
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.mean(), Some(3.0));
    }

    proptest! {
        #[test]
        fn mcc_swap_symmetry(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            let a = mcc(&counts(tp, fp, tn, fn_));
            let b = mcc(&counts(tn, fn_, tp, fp));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn earliness_strictly_decreasing(l in 2usize..100) {
            for j in 1..l {
                prop_assert!(earliness(j, l).unwrap() > earliness(j + 1, l).unwrap());
            }
        }

        #[test]
        fn savings_antitone(c in 0.1f64..1000.0, a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
            prop_assert_eq!(cost_savings(c, c).unwrap(), 0.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cost_savings(c, lo).unwrap() >= cost_savings(c, hi).unwrap());
        }
    }
}
