//! Experiment orchestration: fit/measure split, the cost grid with
//! repetitions, policy dispatch, results CSV and reports.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    CostCell, ExperimentConfig, PolicyKind, CONFIG_KEYS, DEFAULT_FIT_FRACTION, DEFAULT_GRID,
    DEFAULT_REPETITIONS, DEFAULT_XI, XI_SWEEP,
};
pub use report::{
    summarize, write_report, PolicyStanding, PolicySummary, Report, Situation, SituationWinner,
};

use crate::costmodel::{sample_envelope, CostParameters, EnvelopeSpec};
use crate::metrics::cost_savings;
use crate::policies::{
    evaluate_policy, first_positive_decide, fit_static_point, fit_threshold, static_decide, threshold_decide,
    AlarmDecision, CaseEvaluation, OutcomeSummary, StaticPointConfig,
};
use crate::rl::{run_stream, write_learning_curve, LearningCurve, OnlineAgent};
use crate::stream::PredictionStream;
use crate::{Error, Result};

pub const RESULTS_HEADER: [&str; 11] = [
    "policy",
    "lambda",
    "kappa",
    "alpha_min",
    "xi",
    "repetition",
    "mean_cost",
    "alarm_rate",
    "accurate_alarm_rate",
    "mean_earliness",
    "cost_savings",
];

/// Contiguous split at `round(fit_fraction * N)`; arrival order is kept.
pub fn split_stream(
    stream: &PredictionStream,
    fit_fraction: f64,
) -> Result<(PredictionStream, PredictionStream)> {
    if !(fit_fraction > 0.0 && fit_fraction < 1.0) {
        return Err(Error::Config(format!(
            "fit fraction {fit_fraction} outside (0, 1)"
        )));
    }
    let n = stream.len();
    let cut = (fit_fraction * n as f64).round() as usize;
    if cut == 0 || cut >= n {
        return Err(Error::Config(format!(
            "fit fraction {fit_fraction} leaves an empty slice of a {n}-case stream"
        )));
    }
    Ok((stream.slice(0..cut)?, stream.slice(cut..n)?))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one run, a hash of its coordinates in the grid.
pub fn run_seed(
    master_seed: u64,
    cell_index: usize,
    policy: PolicyKind,
    xi_index: usize,
    repetition: usize,
) -> u64 {
    [
        cell_index as u64,
        policy as u64,
        xi_index as u64,
        repetition as u64,
    ]
    .into_iter()
    .fold(splitmix64(master_seed), |h, x| splitmix64(h ^ x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_cost: f64,
    pub alarm_rate: f64,
    pub accurate_alarm_rate: f64,
    pub mean_earliness: f64,
    /// Relative savings against never adapting; `None` when never adapting is free.
    pub cost_savings: Option<f64>,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub policy: PolicyKind,
    pub cell: CostCell,
    /// Envelope half-width, for empirical thresholding only.
    pub xi: Option<f64>,
    /// 1-based.
    pub repetition: usize,
    /// `None` for a failed run.
    pub metrics: Option<RunMetrics>,
    /// Why the run failed; not part of the CSV.
    pub error: Option<String>,
}

impl RunResult {
    pub fn is_failed(&self) -> bool {
        self.metrics.is_none()
    }
}

#[derive(Debug, Clone, Copy)]
struct Task {
    cell_index: usize,
    cell: CostCell,
    policy: PolicyKind,
    xi: Option<(usize, f64)>,
    repetition: usize,
}

fn tasks(config: &ExperimentConfig) -> Vec<Task> {
    let mut policies = config.policies.clone();
    policies.sort();
    policies.dedup();
    let mut out = Vec::new();
    for (cell_index, cell) in config.cells().into_iter().enumerate() {
        for &policy in &policies {
            let task = |xi, repetition| Task {
                cell_index,
                cell,
                policy,
                xi,
                repetition,
            };
            match policy {
                PolicyKind::Threshold => {
                    for (i, &xi) in config.xi_values.iter().enumerate() {
                        out.extend((1..=config.repetitions).map(|r| task(Some((i, xi)), r)));
                    }
                }
                PolicyKind::OnlineRl => out.extend((1..=config.repetitions).map(|r| task(None, r))),
                _ => out.push(task(None, 1)),
            }
        }
    }
    out
}

/// Shared, read-only inputs of every run.
struct GridContext<'a> {
    config: &'a ExperimentConfig,
    master_seed: u64,
    fit: PredictionStream,
    measure: PredictionStream,
    static_point: std::result::Result<StaticPointConfig, String>,
    curves_dir: Option<&'a Path>,
}

impl GridContext<'_> {
    fn params(&self, cell: CostCell) -> Result<CostParameters> {
        CostParameters::new(self.config.penalty, cell.lambda, cell.kappa, cell.alpha_min)
    }

    fn measure_with<F>(&self, params: &CostParameters, decide: F) -> Vec<CaseEvaluation>
    where
        F: FnMut(&crate::stream::PredictionPoint) -> AlarmDecision,
    {
        evaluate_policy(&self.measure, params, decide)
    }

    fn evaluations(&self, task: &Task) -> Result<Vec<CaseEvaluation>> {
        let params = self.params(task.cell)?;
        let seed = run_seed(
            self.master_seed,
            task.cell_index,
            task.policy,
            task.xi.map_or(0, |(i, _)| i),
            task.repetition,
        );
        Ok(match task.policy {
            PolicyKind::Never => self.measure_with(&params, |_| AlarmDecision::Continue),
            PolicyKind::FirstPositive => self.measure_with(&params, first_positive_decide),
            PolicyKind::Static => {
                let point = self.static_point.clone().map_err(Error::Fit)?;
                self.measure_with(&params, |p| static_decide(p, &point))
            }
            PolicyKind::Threshold => {
                let (_, xi) = task.xi.expect("threshold tasks carry an envelope width");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let believed = sample_envelope(&params, EnvelopeSpec::new(xi)?, &mut rng);
                let fitted = fit_threshold(&self.fit, &believed)?;
                self.measure_with(&params, |p| threshold_decide(p, fitted.threshold))
            }
            PolicyKind::OnlineRl => {
                let mut agent = OnlineAgent::new(self.config.hyper, seed)?;
                let warm = run_stream(&self.fit, &mut agent, &params)?;
                let run = run_stream(&self.measure, &mut agent, &params)?;
                if let Some(dir) = self.curves_dir {
                    let evals: Vec<CaseEvaluation> =
                        warm.evaluations.iter().chain(&run.evaluations).cloned().collect();
                    let rewards: Vec<f64> = warm.rewards.iter().chain(&run.rewards).copied().collect();
                    let curve = LearningCurve::from_run(&evals, &rewards);
                    write_learning_curve(&curve, dir.join(curve_file_name(task.cell, task.repetition)))?;
                }
                run.evaluations
            }
        })
    }

    fn run(&self, task: &Task) -> Result<RunResult> {
        let mut result = RunResult {
            policy: task.policy,
            cell: task.cell,
            xi: task.xi.map(|(_, xi)| xi),
            repetition: task.repetition,
            metrics: None,
            error: None,
        };
        match self.evaluations(task) {
            Ok(evals) => {
                let summary = OutcomeSummary::from_evaluations(&evals);
                let never_cost = self.never_cost(task.cell)?;
                result.metrics = Some(RunMetrics {
                    mean_cost: summary.mean_cost,
                    alarm_rate: summary.alarm_rate,
                    accurate_alarm_rate: summary.accurate_alarm_rate,
                    mean_earliness: summary.mean_earliness,
                    cost_savings: cost_savings(never_cost, summary.mean_cost).ok(),
                });
            }
            // Writing a learning curve is infrastructure, not the run.
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => result.error = Some(e.to_string()),
        }
        Ok(result)
    }

    fn never_cost(&self, cell: CostCell) -> Result<f64> {
        let params = self.params(cell)?;
        let evals = self.measure_with(&params, |_| AlarmDecision::Continue);
        Ok(OutcomeSummary::from_evaluations(&evals).mean_cost)
    }
}

/// File name of the learning curve of one online-RL run.
pub fn curve_file_name(cell: CostCell, repetition: usize) -> String {
    format!(
        "online_rl_lambda{}_kappa{}_alpha{}_rep{repetition}.csv",
        cell.lambda, cell.kappa, cell.alpha_min
    )
}

/// Runs every (cell, policy, envelope width, repetition) of `config`.
///
/// `never`, `first_positive` and `static` run once per cell; `threshold` and
/// `online_rl` run `repetitions` times. Thresholds are fitted on the fit slice
/// against a cost model drawn from the envelope around the cell and charged
/// with the true cell costs. The learner warms up on the fit slice and keeps
/// learning while it is measured. Failed runs are kept as rows without
/// metrics. The output order is canonical whatever the worker count.
pub fn run_grid(
    stream: &PredictionStream,
    config: &ExperimentConfig,
    master_seed: u64,
    curves_dir: Option<&Path>,
) -> Result<Vec<RunResult>> {
    config.validate()?;
    let (fit, measure) = split_stream(stream, config.fit_fraction)?;
    let static_point = if config.includes(PolicyKind::Static) {
        fit_static_point(&fit, config.static_theta).map_err(|e| e.to_string())
    } else {
        Err("static policy not selected".into())
    };
    if let Some(dir) = curves_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ctx = GridContext {
        config,
        master_seed,
        fit,
        measure,
        static_point,
        curves_dir,
    };
    let tasks = tasks(config);
    let work = || {
        tasks
            .par_iter()
            .map(|t| ctx.run(t))
            .collect::<Result<Vec<RunResult>>>()
    };
    match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(work),
        None => work(),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_results(results: &[RunResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::Io {
        path: PathBuf::from(path),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(RESULTS_HEADER).map_err(io)?;
    for r in results {
        let m = r.metrics;
        w.write_record([
            r.policy.name().to_string(),
            r.cell.lambda.to_string(),
            r.cell.kappa.to_string(),
            r.cell.alpha_min.to_string(),
            fmt_opt(r.xi),
            r.repetition.to_string(),
            fmt_opt(m.map(|m| m.mean_cost)),
            fmt_opt(m.map(|m| m.alarm_rate)),
            fmt_opt(m.map(|m| m.accurate_alarm_rate)),
            fmt_opt(m.map(|m| m.mean_earliness)),
            fmt_opt(m.and_then(|m| m.cost_savings)),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: PathBuf::from(path),
        source: e.into(),
    })?;
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", RESULTS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let bad = |field: &str, v: &str| Error::Parse {
            line,
            message: format!("invalid `{field}` value `{v}`"),
        };
        let num = |k: usize| -> Result<Option<f64>> {
            let v = rec[k].trim();
            if v.is_empty() {
                return Ok(None);
            }
            v.parse().map(Some).map_err(|_| bad(RESULTS_HEADER[k], v))
        };
        let req = |k: usize| num(k)?.ok_or_else(|| bad(RESULTS_HEADER[k], ""));
        let policy: PolicyKind = rec[0].parse().map_err(|_| bad("policy", &rec[0]))?;
        let repetition = rec[5].trim().parse().map_err(|_| bad("repetition", &rec[5]))?;
        let metrics = match (num(6)?, num(7)?, num(8)?, num(9)?) {
            (Some(mean_cost), Some(alarm_rate), Some(accurate_alarm_rate), Some(mean_earliness)) => {
                Some(RunMetrics {
                    mean_cost,
                    alarm_rate,
                    accurate_alarm_rate,
                    mean_earliness,
                    cost_savings: num(10)?,
                })
            }
            (None, None, None, None) => None,
            _ => return Err(bad("metrics", "partially empty")),
        };
        out.push(RunResult {
            policy,
            cell: CostCell {
                lambda: req(1)?,
                kappa: req(2)?,
                alpha_min: req(3)?,
            },
            xi: num(4)?,
            repetition,
            error: metrics.is_none().then(|| "failed run".to_string()),
            metrics,
        });
    }
    Ok(out)
}
