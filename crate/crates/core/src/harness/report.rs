//! Aggregation of the results table: per-situation averages, the winning
//! policy of each situation and how often each policy wins.

use std::fs;
use std::path::{Path, PathBuf};

use super::{CostCell, PolicyKind, RunResult};
use crate::metrics::cost_savings;
use crate::{Error, Result};

/// A cost cell together with the envelope width thresholding was fitted under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Situation {
    pub cell: CostCell,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub situation: Situation,
    pub policy: PolicyKind,
    pub runs: usize,
    pub failed: usize,
    /// Averages over the completed runs; `None` if every run failed.
    pub mean_cost: Option<f64>,
    /// Sample standard deviation of the run costs; 0 for a single run.
    pub std_cost: Option<f64>,
    pub alarm_rate: Option<f64>,
    pub accurate_alarm_rate: Option<f64>,
    pub mean_earliness: Option<f64>,
    /// Savings of `mean_cost` against the situation's never-adapt cost.
    pub cost_savings: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SituationWinner {
    pub situation: Situation,
    pub winner: Option<PolicyKind>,
    pub winner_cost: Option<f64>,
    pub never_cost: Option<f64>,
    pub cost_savings: Option<f64>,
    /// Some proactive policy is strictly cheaper than never adapting.
    pub counted: bool,
    /// Some policy of the situation has failed runs.
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStanding {
    pub policy: PolicyKind,
    pub wins: usize,
    /// `wins` over the counted situations.
    pub win_fraction: f64,
    /// Mean savings of the policy over the counted situations.
    pub mean_cost_savings: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<PolicySummary>,
    pub winners: Vec<SituationWinner>,
    pub standings: Vec<PolicyStanding>,
    pub counted_situations: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

fn same_cell(a: &CostCell, b: &CostCell) -> bool {
    a.lambda.to_bits() == b.lambda.to_bits()
        && a.kappa.to_bits() == b.kappa.to_bits()
        && a.alpha_min.to_bits() == b.alpha_min.to_bits()
}

fn push_unique(xs: &mut Vec<f64>, x: f64) {
    if !xs.iter().any(|y| y.to_bits() == x.to_bits()) {
        xs.push(x);
    }
}

/// Situations in order of first appearance. Policies without an envelope
/// width take part in every situation of their cell.
fn situations(results: &[RunResult]) -> Vec<(Situation, Vec<&RunResult>)> {
    let mut cells: Vec<CostCell> = Vec::new();
    for r in results {
        if !cells.iter().any(|c| same_cell(c, &r.cell)) {
            cells.push(r.cell);
        }
    }
    let mut out = Vec::new();
    for cell in cells {
        let rows: Vec<&RunResult> = results.iter().filter(|r| same_cell(&r.cell, &cell)).collect();
        let mut xis = Vec::new();
        for r in &rows {
            if let Some(xi) = r.xi {
                push_unique(&mut xis, xi);
            }
        }
        if xis.is_empty() {
            out.push((Situation { cell, xi: None }, rows));
            continue;
        }
        for xi in xis {
            let members = rows
                .iter()
                .copied()
                .filter(|r| r.xi.is_none_or(|x| x.to_bits() == xi.to_bits()))
                .collect();
            out.push((Situation { cell, xi: Some(xi) }, members));
        }
    }
    out
}

fn summarize_policy(situation: Situation, policy: PolicyKind, rows: &[&RunResult]) -> PolicySummary {
    let done: Vec<_> = rows.iter().filter_map(|r| r.metrics).collect();
    let pick = |f: fn(&super::RunMetrics) -> f64| -> Vec<f64> { done.iter().map(f).collect() };
    let costs = pick(|m| m.mean_cost);
    PolicySummary {
        situation,
        policy,
        runs: rows.len(),
        failed: rows.len() - done.len(),
        mean_cost: mean(&costs),
        std_cost: sample_std(&costs),
        alarm_rate: mean(&pick(|m| m.alarm_rate)),
        accurate_alarm_rate: mean(&pick(|m| m.accurate_alarm_rate)),
        mean_earliness: mean(&pick(|m| m.mean_earliness)),
        cost_savings: None,
    }
}

/// Winner: lowest mean cost, then higher mean earliness, then policy name.
fn pick_winner<'a>(summaries: &[&'a PolicySummary]) -> Option<&'a PolicySummary> {
    summaries
        .iter()
        .copied()
        .filter(|s| s.mean_cost.is_some())
        .min_by(|a, b| {
            let (ca, cb) = (a.mean_cost.unwrap(), b.mean_cost.unwrap());
            ca.total_cmp(&cb)
                .then_with(|| {
                    let ea = a.mean_earliness.unwrap_or(0.0);
                    let eb = b.mean_earliness.unwrap_or(0.0);
                    eb.total_cmp(&ea)
                })
                .then_with(|| a.policy.name().cmp(b.policy.name()))
        })
}

/// Averages repetitions per situation and policy, names a winner per
/// situation and scores each policy over the situations where adapting pays
/// off (or over all situations when `never` was not run).
pub fn summarize(results: &[RunResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Config("no results to summarize".into()));
    }
    let mut summaries = Vec::new();
    let mut winners = Vec::new();
    for (situation, rows) in situations(results) {
        let first = summaries.len();
        for policy in PolicyKind::ALL {
            let mine: Vec<&RunResult> = rows.iter().copied().filter(|r| r.policy == policy).collect();
            if !mine.is_empty() {
                summaries.push(summarize_policy(situation, policy, &mine));
            }
        }
        let block = &mut summaries[first..];
        let never_cost = block
            .iter()
            .find(|s| s.policy == PolicyKind::Never)
            .and_then(|s| s.mean_cost);
        for s in block.iter_mut() {
            s.cost_savings = match (never_cost, s.mean_cost) {
                (Some(n), Some(c)) => cost_savings(n, c).ok(),
                _ => None,
            };
        }
        let refs: Vec<&PolicySummary> = block.iter().collect();
        let best = pick_winner(&refs);
        let counted = match never_cost {
            Some(n) => block
                .iter()
                .any(|s| s.policy != PolicyKind::Never && s.mean_cost.is_some_and(|c| c < n)),
            None => best.is_some(),
        };
        winners.push(SituationWinner {
            situation,
            winner: best.map(|s| s.policy),
            winner_cost: best.and_then(|s| s.mean_cost),
            never_cost,
            cost_savings: best.and_then(|s| s.cost_savings),
            counted,
            incomplete: block.iter().any(|s| s.failed > 0),
        });
    }

    let counted_situations = winners.iter().filter(|w| w.counted).count();
    let mut standings = Vec::new();
    for policy in PolicyKind::ALL {
        if !summaries.iter().any(|s| s.policy == policy) {
            continue;
        }
        let wins = winners
            .iter()
            .filter(|w| w.counted && w.winner == Some(policy))
            .count();
        let savings: Vec<f64> = winners
            .iter()
            .filter(|w| w.counted)
            .filter_map(|w| {
                summaries
                    .iter()
                    .find(|s| s.policy == policy && s.situation == w.situation)
                    .and_then(|s| s.cost_savings)
            })
            .collect();
        standings.push(PolicyStanding {
            policy,
            wins,
            win_fraction: if counted_situations == 0 {
                0.0
            } else {
                wins as f64 / counted_situations as f64
            },
            mean_cost_savings: mean(&savings),
        });
    }
    Ok(Report {
        summaries,
        winners,
        standings,
        counted_situations,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv(path: PathBuf, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: path.clone(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn situation_fields(s: &Situation) -> [String; 4] {
    [
        s.cell.lambda.to_string(),
        s.cell.kappa.to_string(),
        s.cell.alpha_min.to_string(),
        opt(s.xi),
    ]
}

/// Writes `summary.csv`, `winners.csv` and `policies.csv` into `dir`.
pub fn write_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        dir.join("summary.csv"),
        &[
            "lambda",
            "kappa",
            "alpha_min",
            "xi",
            "policy",
            "runs",
            "failed",
            "mean_cost",
            "std_cost",
            "alarm_rate",
            "accurate_alarm_rate",
            "mean_earliness",
            "cost_savings",
        ],
        report
            .summaries
            .iter()
            .map(|s| {
                let mut row = situation_fields(&s.situation).to_vec();
                row.extend([
                    s.policy.name().to_string(),
                    s.runs.to_string(),
                    s.failed.to_string(),
                    opt(s.mean_cost),
                    opt(s.std_cost),
                    opt(s.alarm_rate),
                    opt(s.accurate_alarm_rate),
                    opt(s.mean_earliness),
                    opt(s.cost_savings),
                ]);
                row
            })
            .collect(),
    )?;
    write_csv(
        dir.join("winners.csv"),
        &[
            "lambda",
            "kappa",
            "alpha_min",
            "xi",
            "winner",
            "winner_cost",
            "never_cost",
            "cost_savings",
            "counted",
            "incomplete",
        ],
        report
            .winners
            .iter()
            .map(|w| {
                let mut row = situation_fields(&w.situation).to_vec();
                row.extend([
                    w.winner.map(|p| p.name().to_string()).unwrap_or_default(),
                    opt(w.winner_cost),
                    opt(w.never_cost),
                    opt(w.cost_savings),
                    w.counted.to_string(),
                    w.incomplete.to_string(),
                ]);
                row
            })
            .collect(),
    )?;
    write_csv(
        dir.join("policies.csv"),
        &[
            "policy",
            "wins",
            "win_fraction",
            "mean_cost_savings",
            "counted_situations",
        ],
        report
            .standings
            .iter()
            .map(|s| {
                vec![
                    s.policy.name().to_string(),
                    s.wins.to_string(),
                    s.win_fraction.to_string(),
                    opt(s.mean_cost_savings),
                    report.counted_situations.to_string(),
                ]
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::super::RunMetrics;
    use super::*;

    fn row(policy: PolicyKind, lambda: f64, xi: Option<f64>, rep: usize, cost: f64, early: f64) -> RunResult {
        RunResult {
            policy,
            cell: CostCell {
                lambda,
                kappa: 0.25,
                alpha_min: 1.0,
            },
            xi,
            repetition: rep,
            metrics: Some(RunMetrics {
                mean_cost: cost,
                alarm_rate: 0.5,
                accurate_alarm_rate: 0.5,
                mean_earliness: early,
                cost_savings: None,
            }),
            error: None,
        }
    }

    #[test]
    fn threshold_winning_everything() {
        let results = vec![
            row(PolicyKind::Never, 0.0, None, 1, 30.0, 0.0),
            row(PolicyKind::FirstPositive, 0.0, None, 1, 25.0, 0.9),
            row(PolicyKind::Threshold, 0.0, Some(0.1), 1, 19.0, 0.5),
            row(PolicyKind::Threshold, 0.0, Some(0.1), 2, 20.6, 0.5),
        ];
        let report = summarize(&results).unwrap();
        assert_eq!(report.counted_situations, 1);
        let w = &report.winners[0];
        assert_eq!(w.winner, Some(PolicyKind::Threshold));
        assert!((w.winner_cost.unwrap() - 19.8).abs() < 1e-12);
        assert!((w.cost_savings.unwrap() - 0.34).abs() < 1e-12);
        let t = report
            .standings
            .iter()
            .find(|s| s.policy == PolicyKind::Threshold)
            .unwrap();
        assert_eq!((t.wins, t.win_fraction), (1, 1.0));
        let s = report
            .summaries
            .iter()
            .find(|s| s.policy == PolicyKind::Threshold)
            .unwrap();
        assert_eq!(s.runs, 2);
        assert!((s.std_cost.unwrap() - (0.64f64 * 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn never_cheapest_is_excluded() {
        let results = vec![
            row(PolicyKind::Never, 0.0, None, 1, 30.0, 0.0),
            row(PolicyKind::FirstPositive, 0.0, None, 1, 40.0, 0.9),
            row(PolicyKind::Never, 1.0, None, 1, 30.0, 0.0),
            row(PolicyKind::FirstPositive, 1.0, None, 1, 20.0, 0.9),
        ];
        let report = summarize(&results).unwrap();
        assert_eq!(report.winners.len(), 2);
        assert_eq!(report.winners[0].winner, Some(PolicyKind::Never));
        assert!(!report.winners[0].counted);
        assert_eq!(report.counted_situations, 1);
        let fp = report
            .standings
            .iter()
            .find(|s| s.policy == PolicyKind::FirstPositive)
            .unwrap();
        assert_eq!(fp.win_fraction, 1.0);
        assert_eq!(fp.mean_cost_savings, Some(1.0 / 3.0));
        let total: f64 = report.standings.iter().map(|s| s.win_fraction).sum();
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn ties_prefer_earlier_alarms_then_names() {
        let results = vec![
            row(PolicyKind::Never, 0.0, None, 1, 30.0, 0.0),
            row(PolicyKind::Static, 0.0, None, 1, 10.0, 0.4),
            row(PolicyKind::FirstPositive, 0.0, None, 1, 10.0, 0.8),
            row(PolicyKind::Never, 1.0, None, 1, 30.0, 0.0),
            row(PolicyKind::Static, 1.0, None, 1, 10.0, 0.5),
            row(PolicyKind::FirstPositive, 1.0, None, 1, 10.0, 0.5),
        ];
        let report = summarize(&results).unwrap();
        assert_eq!(report.winners[0].winner, Some(PolicyKind::FirstPositive));
        assert_eq!(report.winners[1].winner, Some(PolicyKind::FirstPositive));
    }

    #[test]
    fn envelope_widths_split_situations() {
        let results = vec![
            row(PolicyKind::Never, 0.0, None, 1, 30.0, 0.0),
            row(PolicyKind::Threshold, 0.0, Some(0.1), 1, 20.0, 0.5),
            row(PolicyKind::Threshold, 0.0, Some(0.25), 1, 35.0, 0.5),
        ];
        let report = summarize(&results).unwrap();
        assert_eq!(report.winners.len(), 2);
        assert_eq!(report.winners[0].situation.xi, Some(0.1));
        assert!(report.winners[0].counted);
        assert!(!report.winners[1].counted);
        assert_eq!(report.summaries.len(), 4);
    }

    #[test]
    fn failures_mark_situations() {
        let mut failed = row(PolicyKind::Threshold, 0.0, Some(0.1), 2, 0.0, 0.0);
        failed.metrics = None;
        let results = vec![
            row(PolicyKind::Never, 0.0, None, 1, 30.0, 0.0),
            row(PolicyKind::Threshold, 0.0, Some(0.1), 1, 20.0, 0.5),
            failed,
        ];
        let report = summarize(&results).unwrap();
        assert!(report.winners[0].incomplete);
        let t = report
            .summaries
            .iter()
            .find(|s| s.policy == PolicyKind::Threshold)
            .unwrap();
        assert_eq!((t.runs, t.failed, t.mean_cost), (2, 1, Some(20.0)));
        assert!(summarize(&[]).is_err());

        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let winners = fs::read_to_string(dir.path().join("winners.csv")).unwrap();
        assert_eq!(
            winners.lines().nth(1).unwrap(),
            "0,0.25,1,0.1,threshold,20,30,0.3333333333333333,true,true"
        );
        for f in ["summary.csv", "policies.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
