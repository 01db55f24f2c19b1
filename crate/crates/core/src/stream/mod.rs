//! Prefix-wise prediction streams.
//!
//! A [`PredictionStream`] is the chronologically ordered list of cases a
//! policy is evaluated on. Every case carries one [`PredictionPoint`] per
//! prefix length together with its ground-truth outcome. Streams are
//! validated on construction and immutable afterwards.

mod io;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{
    load_base_matrix, load_stream, load_stream_with_outcome, write_base_matrix, write_stream, StreamFormat,
    JSONL_FORMAT_TAG,
};

/// Default expected outcome for categorical logs (non-violation 0.0, violation 1.0).
pub const DEFAULT_EXPECTED_OUTCOME: f64 = 0.5;

/// One prediction made after `j` events of a case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionPoint {
    /// 1-based prefix length.
    pub j: usize,
    /// Relative predicted deviation; positive values forecast a deviation.
    pub delta: f64,
    /// Ensemble agreement in `[0.5, 1]`.
    pub rho: f64,
    /// Relative prefix length `j / l`.
    pub tau: f64,
}

impl PredictionPoint {
    pub fn predicts_deviation(&self) -> bool {
        self.delta > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub points: Vec<PredictionPoint>,
    /// Case length `l`; always equal to `points.len()`.
    pub length: usize,
    /// Actual outcome `y`.
    pub outcome: f64,
    pub deviation: bool,
}

impl CaseRecord {
    /// Builds a case from `(delta, rho)` pairs for prefixes `1..=l`, computing `tau`.
    pub fn from_predictions(
        case_id: impl Into<String>,
        predictions: &[(f64, f64)],
        outcome: f64,
        deviation: bool,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let length = predictions.len();
        if length == 0 {
            return Err(Error::validation(
                case_id,
                "points",
                "case has no prediction points",
            ));
        }
        let points = predictions
            .iter()
            .enumerate()
            .map(|(idx, &(delta, rho))| {
                Ok(PredictionPoint {
                    j: idx + 1,
                    delta,
                    rho,
                    tau: compute_tau(idx + 1, length)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let case = CaseRecord {
            case_id,
            points,
            length,
            outcome,
            deviation,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.case_id.as_str();
        if self.points.is_empty() || self.length == 0 {
            return Err(Error::validation(id, "points", "case has no prediction points"));
        }
        if self.points.len() != self.length {
            return Err(Error::validation(
                id,
                "l",
                format!(
                    "case length {} does not match {} prediction points",
                    self.length,
                    self.points.len()
                ),
            ));
        }
        if !self.outcome.is_finite() {
            return Err(Error::validation(id, "y", "outcome is not finite"));
        }
        for (idx, p) in self.points.iter().enumerate() {
            if p.j != idx + 1 {
                return Err(Error::validation(
                    id,
                    "j",
                    format!("expected prefix {} but found {}", idx + 1, p.j),
                ));
            }
            if !p.delta.is_finite() {
                return Err(Error::validation(
                    id,
                    "delta",
                    format!("non-finite delta at prefix {}", p.j),
                ));
            }
            if !(0.5..=1.0).contains(&p.rho) {
                return Err(Error::validation(
                    id,
                    "rho",
                    format!("rho {} at prefix {} outside [0.5, 1]", p.rho, p.j),
                ));
            }
            if p.tau != p.j as f64 / self.length as f64 {
                return Err(Error::validation(
                    id,
                    "tau",
                    format!("tau {} at prefix {} is not j/l", p.tau, p.j),
                ));
            }
        }
        Ok(())
    }
}

/// Per-prefix predictions of the `m` base models of an ensemble for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePredictionMatrix {
    pub case_id: String,
    pub expected_outcome: f64,
    /// `entries[j - 1][i]` is the prediction of base model `i` after `j` events.
    pub entries: Vec<Vec<f64>>,
}

impl BasePredictionMatrix {
    pub fn ensemble_size(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.ensemble_size();
        if self.entries.is_empty() {
            return Err(Error::validation(&self.case_id, "j", "no prefixes"));
        }
        if m == 0 {
            return Err(Error::validation(
                &self.case_id,
                "model_index",
                "ensemble is empty",
            ));
        }
        for (idx, row) in self.entries.iter().enumerate() {
            if row.len() != m {
                return Err(Error::validation(
                    &self.case_id,
                    "model_index",
                    format!("prefix {} has {} predictions, expected {}", idx + 1, row.len(), m),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    &self.case_id,
                    "y_hat",
                    format!("non-finite prediction at prefix {}", idx + 1),
                ));
            }
        }
        Ok(())
    }
}

/// Ground truth of a case as found in the truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    pub case_id: String,
    pub y: f64,
    pub deviation: bool,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStream {
    cases: Vec<CaseRecord>,
    expected_outcome: f64,
}

impl PredictionStream {
    pub fn new(cases: Vec<CaseRecord>, expected_outcome: f64) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyStream);
        }
        if !expected_outcome.is_finite() || expected_outcome == 0.0 {
            return Err(Error::domain(format!(
                "expected outcome must be finite and non-zero, got {expected_outcome}"
            )));
        }
        let mut seen = HashSet::with_capacity(cases.len());
        for case in &cases {
            case.validate()?;
            if !seen.insert(case.case_id.as_str()) {
                return Err(Error::validation(&case.case_id, "case_id", "duplicate case id"));
            }
        }
        // Categorical logs map non-violations to 0.0 and violations to 1.0.
        if cases.iter().all(|c| c.outcome == 0.0 || c.outcome == 1.0) {
            if let Some(bad) = cases.iter().find(|c| c.deviation != (c.outcome == 1.0)) {
                return Err(Error::validation(
                    &bad.case_id,
                    "deviation",
                    "categorical outcome disagrees with the deviation flag",
                ));
            }
        }
        Ok(PredictionStream {
            cases,
            expected_outcome,
        })
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn expected_outcome(&self) -> f64 {
        self.expected_outcome
    }

    pub fn deviation_rate(&self) -> f64 {
        self.cases.iter().filter(|c| c.deviation).count() as f64 / self.cases.len() as f64
    }

    pub fn max_length(&self) -> usize {
        self.cases.iter().map(|c| c.length).max().unwrap_or(0)
    }

    /// Contiguous sub-stream `cases[range]`, keeping arrival order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let cases = self
            .cases
            .get(range.clone())
            .ok_or_else(|| Error::Config(format!("slice {range:?} out of bounds")))?
            .to_vec();
        PredictionStream::new(cases, self.expected_outcome)
    }

    pub fn into_cases(self) -> Vec<CaseRecord> {
        self.cases
    }
}

/// Relative predicted deviation of a prediction against the expected outcome.
pub fn compute_delta(y_hat: f64, expected_outcome: f64) -> Result<f64> {
    if expected_outcome == 0.0 {
        return Err(Error::domain(
            "relative deviation undefined for expected outcome 0",
        ));
    }
    Ok((y_hat - expected_outcome) / expected_outcome)
}

/// Ensemble-voting reliability: the share of the majority among positive and
/// non-positive base deltas. A delta of exactly zero counts as non-positive.
pub fn compute_rho(base_deltas: &[f64]) -> Result<f64> {
    if base_deltas.is_empty() {
        return Err(Error::domain("reliability undefined for an empty ensemble"));
    }
    let m = base_deltas.len() as f64;
    let positive = base_deltas.iter().filter(|&&d| d > 0.0).count() as f64;
    let non_positive = base_deltas.len() as f64 - positive;
    Ok((positive / m).max(non_positive / m))
}

pub fn compute_tau(j: usize, l: usize) -> Result<f64> {
    if j < 1 || j > l {
        return Err(Error::domain(format!("prefix {j} outside 1..={l}")));
    }
    Ok(j as f64 / l as f64)
}

/// Collapses a base-model matrix into a case: `delta` of the mean prediction,
/// `rho` from the per-model deltas and `tau = j / l`.
pub fn aggregate_ensemble(matrix: &BasePredictionMatrix, truth: &CaseTruth) -> Result<CaseRecord> {
    matrix.validate()?;
    if matrix.case_id != truth.case_id {
        return Err(Error::validation(
            &matrix.case_id,
            "case_id",
            format!("truth record belongs to `{}`", truth.case_id),
        ));
    }
    if truth.l != matrix.entries.len() {
        return Err(Error::validation(
            &matrix.case_id,
            "l",
            format!(
                "truth length {} but {} prefixes of predictions",
                truth.l,
                matrix.entries.len()
            ),
        ));
    }
    let a = matrix.expected_outcome;
    let predictions = matrix
        .entries
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let delta = compute_delta(mean, a)?;
            let base = row
                .iter()
                .map(|&y_hat| compute_delta(y_hat, a))
                .collect::<Result<Vec<_>>>()?;
            Ok((delta, compute_rho(&base)?))
        })
        .collect::<Result<Vec<_>>>()?;
    CaseRecord::from_predictions(truth.case_id.clone(), &predictions, truth.y, truth.deviation)
}

/// Aggregates a full base-matrix stream (matrices paired with truth, in arrival order).
pub fn aggregate_stream(
    matrices: &[BasePredictionMatrix],
    truths: &[CaseTruth],
    expected_outcome: f64,
) -> Result<PredictionStream> {
    if matrices.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} prediction matrices but {} truth records",
            matrices.len(),
            truths.len()
        )));
    }
    let cases = matrices
        .iter()
        .zip(truths)
        .map(|(m, t)| aggregate_ensemble(m, t))
        .collect::<Result<Vec<_>>>()?;
    PredictionStream::new(cases, expected_outcome)
}

/// Nearest-rank quantile of case lengths: the `ceil(q * N)`-th smallest length.
pub fn length_quantile(stream: &PredictionStream, q: f64) -> Result<usize> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("quantile {q} outside (0, 1]")));
    }
    let mut lengths: Vec<usize> = stream.cases.iter().map(|c| c.length).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    // Tolerate representation error such as 0.99 * 100 = 99.00000000000001.
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(lengths[rank.min(n) - 1])
}

/// Truncates every case to the `q`-quantile `L` of case lengths. Lengths are
/// reset to `min(l, L)` and `tau` is recomputed against the new length.
pub fn truncate_to_quantile(stream: &PredictionStream, q: f64) -> Result<PredictionStream> {
    let cap = length_quantile(stream, q)?;
    let cases = stream
        .cases
        .iter()
        .map(|case| {
            if case.length <= cap {
                return case.clone();
            }
            let points = case.points[..cap]
                .iter()
                .map(|p| PredictionPoint {
                    tau: p.j as f64 / cap as f64,
                    ..*p
                })
                .collect();
            CaseRecord {
                points,
                length: cap,
                ..case.clone()
            }
        })
        .collect();
    PredictionStream::new(cases, stream.expected_outcome)
}
