//! Episodes, the online learning loop, learning curves and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppo::{log_prob, ppo_update, Step, Trajectory};
use super::{
    curiosity_c, earliness_coef_b, policy_forward, select_action, terminal_reward, AgentParameters,
    CuriosityTracker, HyperParameters, RlAction, RlState, CURVE_WINDOW,
};
use crate::costmodel::CostParameters;
use crate::metrics::{earliness, RollingWindow};
use crate::policies::CaseEvaluation;
use crate::stream::{CaseRecord, PredictionStream};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_TAG: &str = "earlywarn-agent/1";

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRun {
    pub alarm_prefix: Option<usize>,
    pub trajectory: Trajectory,
}

impl CaseRun {
    pub fn reward(&self) -> f64 {
        self.trajectory.terminal_reward()
    }
}

/// Plays one episode over `case`. `d` and `v` are read once at the start of
/// the case; the tracker is updated once at the end.
pub fn run_case<R: Rng + ?Sized>(
    case: &CaseRecord,
    params: &AgentParameters,
    tracker: &mut CuriosityTracker,
    rng: &mut R,
) -> Result<CaseRun> {
    let d = tracker.d();
    let v = tracker.v();
    let mut steps = Vec::with_capacity(case.length);
    let mut alarm_prefix = None;
    for point in &case.points {
        let state = RlState {
            delta: point.delta,
            rho: point.rho,
            tau: point.tau,
            d,
            v,
        };
        let (probs, value) = policy_forward(params, &state)?;
        let action = select_action(&probs, rng);
        let logits = params.actor.forward(&state.to_input());
        steps.push(Step {
            state,
            action,
            log_prob: log_prob(&logits, action),
            value,
            reward: 0.0,
        });
        if action == RlAction::Alarm {
            alarm_prefix = Some(point.j);
            break;
        }
    }
    let reward = match alarm_prefix {
        Some(j) => terminal_reward(
            true,
            case.deviation,
            earliness_coef_b(j, case.length),
            curiosity_c(v, d),
            d,
        ),
        None => terminal_reward(false, case.deviation, 1.0, 0.0, d),
    };
    steps.last_mut().expect("validated cases have points").reward = reward;
    tracker.observe(alarm_prefix.is_some(), case.deviation);
    Ok(CaseRun {
        alarm_prefix,
        trajectory: Trajectory { steps },
    })
}

/// A single online learner: one policy, one tracker, one random stream.
#[derive(Debug, Clone)]
pub struct OnlineAgent {
    pub params: AgentParameters,
    pub tracker: CuriosityTracker,
    pub hyper: HyperParameters,
    rng: ChaCha8Rng,
    cases_seen: u64,
}

impl OnlineAgent {
    pub fn new(hyper: HyperParameters, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AgentParameters::from_hyper(&hyper, &mut rng);
        Ok(OnlineAgent {
            params,
            tracker: CuriosityTracker::new(),
            hyper,
            rng,
            cases_seen: 0,
        })
    }

    pub fn cases_seen(&self) -> u64 {
        self.cases_seen
    }

    /// Plays the case and immediately learns from its trajectory.
    pub fn process_case(&mut self, case: &CaseRecord) -> Result<CaseRun> {
        let run = run_case(case, &self.params, &mut self.tracker, &mut self.rng)?;
        ppo_update(
            &mut self.params,
            std::slice::from_ref(&run.trajectory),
            &self.hyper,
        )
        .map_err(|e| Error::Update(format!("case `{}`: {e}", case.case_id)))?;
        self.cases_seen += 1;
        Ok(run)
    }

    /// Current probability of alarming in `state`.
    pub fn alarm_probability(&self, state: &RlState) -> Result<f64> {
        Ok(policy_forward(&self.params, state)?.0[RlAction::Alarm.index()])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT_TAG.to_string(),
            hyper: self.hyper,
            params: self.params.clone(),
            tracker: self.tracker.clone(),
            rng: RngState {
                seed: self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            cases_seen: self.cases_seen,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT_TAG {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        ckpt.hyper.validate()?;
        let bad = |what: &str| Error::Config(format!("corrupt checkpoint: {what}"));
        if ckpt.rng.seed.len() != 64 {
            return Err(bad("rng seed"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&ckpt.rng.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("rng seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos.parse().map_err(|_| bad("rng position"))?);
        let p = &ckpt.params;
        if p.actor.params().len() != p.actor_opt.n_params()
            || p.critic.params().len() != p.critic_opt.n_params()
        {
            return Err(bad("optimiser state does not match the networks"));
        }
        Ok(OnlineAgent {
            params: ckpt.params,
            tracker: ckpt.tracker,
            hyper: ckpt.hyper,
            rng,
            cases_seen: ckpt.cases_seen,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

/// Complete, resumable state of an [`OnlineAgent`], stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub hyper: HyperParameters,
    pub params: AgentParameters,
    pub tracker: CuriosityTracker,
    pub rng: RngState,
    pub cases_seen: u64,
}

pub fn save_checkpoint(agent: &OnlineAgent, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(&agent.checkpoint())
        .map_err(|e| Error::Config(format!("cannot serialize checkpoint: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<OnlineAgent> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    OnlineAgent::from_checkpoint(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based position in the stream.
    pub case_index: usize,
    pub rolling_reward: f64,
    pub rolling_alarm_rate: f64,
    /// Share of alarms in the window raised on deviating cases.
    pub rolling_accurate_alarm_rate: f64,
    /// Mean earliness of the alarms in the window.
    pub rolling_earliness: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Rolling metrics over the last [`CURVE_WINDOW`] cases, one point per case.
    pub fn from_run(evals: &[CaseEvaluation], rewards: &[f64]) -> Self {
        let mut reward = RollingWindow::new(CURVE_WINDOW);
        let mut alarm = RollingWindow::new(CURVE_WINDOW);
        // Per-case alarm outcomes; `None` for silent cases.
        let mut recent: std::collections::VecDeque<Option<(bool, f64)>> =
            std::collections::VecDeque::with_capacity(CURVE_WINDOW);
        let mut points = Vec::with_capacity(evals.len());
        for (idx, (e, r)) in evals.iter().zip(rewards).enumerate() {
            reward.push(*r);
            alarm.push(e.alarm_prefix.is_some() as u8 as f64);
            if recent.len() == CURVE_WINDOW {
                recent.pop_front();
            }
            recent.push_back(
                e.alarm_prefix
                    .map(|j| (e.deviation, earliness(j, e.length).unwrap_or(0.0))),
            );
            let alarms: Vec<(bool, f64)> = recent.iter().flatten().copied().collect();
            let (accurate, early) = if alarms.is_empty() {
                (0.0, 0.0)
            } else {
                let k = alarms.len() as f64;
                (
                    alarms.iter().filter(|a| a.0).count() as f64 / k,
                    alarms.iter().map(|a| a.1).sum::<f64>() / k,
                )
            };
            points.push(CurvePoint {
                case_index: idx + 1,
                rolling_reward: reward.mean().unwrap_or(0.0),
                rolling_alarm_rate: alarm.mean().unwrap_or(0.0),
                rolling_accurate_alarm_rate: accurate,
                rolling_earliness: early,
            });
        }
        LearningCurve { points }
    }
}

pub fn write_learning_curve(curve: &LearningCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(
        "case_index,rolling_reward,rolling_alarm_rate,rolling_accurate_alarm_rate,rolling_earliness\n",
    );
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.case_index,
            p.rolling_reward,
            p.rolling_alarm_rate,
            p.rolling_accurate_alarm_rate,
            p.rolling_earliness
        ));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Output of an online pass over a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RlRun {
    pub evaluations: Vec<CaseEvaluation>,
    pub rewards: Vec<f64>,
    pub curve: LearningCurve,
}

/// Processes the stream in arrival order, learning after every case.
pub fn run_stream(
    stream: &PredictionStream,
    agent: &mut OnlineAgent,
    cost_params: &CostParameters,
) -> Result<RlRun> {
    let mut evaluations = Vec::with_capacity(stream.len());
    let mut rewards = Vec::with_capacity(stream.len());
    for case in stream.cases() {
        let run = agent.process_case(case)?;
        rewards.push(run.reward());
        evaluations.push(CaseEvaluation::new(case, run.alarm_prefix, cost_params)?);
    }
    let curve = LearningCurve::from_run(&evaluations, &rewards);
    Ok(RlRun {
        evaluations,
        rewards,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::OutcomeSummary;
    use crate::rl::NPV_WINDOW;

    fn case(id: &str, len: usize, deviation: bool) -> CaseRecord {
        let d = if deviation { 0.8 } else { -0.8 };
        let preds = vec![(d, 0.9); len];
        CaseRecord::from_predictions(id, &preds, deviation as u8 as f64, deviation).unwrap()
    }

    fn forced(prob_alarm: f64) -> AgentParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = AgentParameters::new(4, 3e-4, &mut rng);
        // Output bias only: logit(alarm) - logit(no alarm) = ln(p / (1 - p)).
        let n = params.actor.params().len();
        let logit = (prob_alarm / (1.0 - prob_alarm)).ln();
        params.actor.params_mut()[n - 2] = logit.clamp(-50.0, 50.0);
        params
    }

    #[test]
    fn alarm_at_first_prefix_ends_episode() {
        let params = forced(1.0 - 1e-12);
        let mut tracker = CuriosityTracker::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = run_case(&case("a", 6, true), &params, &mut tracker, &mut rng).unwrap();
        assert_eq!(run.alarm_prefix, Some(1));
        assert_eq!(run.trajectory.len(), 1);
        // Empty tracker: d = 0, v = 0 => c = 0, b = 1.
        assert_eq!(run.reward(), 1.0);
        assert_eq!(tracker.d(), 1.0);
    }

    #[test]
    fn silent_episodes_get_extrinsic_rewards() {
        let params = forced(1e-12);
        let mut tracker = CuriosityTracker::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let run = run_case(&case("dev", 5, true), &params, &mut tracker, &mut rng).unwrap();
        assert_eq!(run.alarm_prefix, None);
        assert_eq!(run.trajectory.len(), 5);
        assert_eq!(run.reward(), -1.0);
        let nonzero = run.trajectory.steps.iter().filter(|s| s.reward != 0.0).count();
        assert_eq!(nonzero, 1);
        let run = run_case(&case("ok", 3, false), &params, &mut tracker, &mut rng).unwrap();
        assert_eq!(run.reward(), 1.5);
        assert_eq!(tracker.v(), 1.0 / NPV_WINDOW as f64);
    }

    fn stream(n: usize, dev_every: usize) -> PredictionStream {
        let cases = (0..n)
            .map(|i| case(&format!("c{i}"), 4 + i % 5, dev_every > 0 && i % dev_every == 0))
            .collect();
        PredictionStream::new(cases, 0.5).unwrap()
    }

    #[test]
    fn runs_are_reproducible() {
        let s = stream(60, 3);
        let params = CostParameters::with_ratios(0.25, 0.25, 0.5).unwrap();
        let run = |seed| {
            let mut agent = OnlineAgent::new(HyperParameters::default(), seed).unwrap();
            run_stream(&s, &mut agent, &params).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7).rewards, run(8).rewards);
    }

    #[test]
    fn clean_stream_teaches_silence() {
        let s = stream(1000, 0);
        let params = CostParameters::with_ratios(0.25, 0.25, 0.5).unwrap();
        let mut agent = OnlineAgent::new(HyperParameters::default(), 3).unwrap();
        let probe = RlState {
            delta: -0.8,
            rho: 0.9,
            tau: 0.25,
            d: 0.0,
            v: 1.0,
        };
        let before = agent.alarm_probability(&probe).unwrap();
        let run = run_stream(&s, &mut agent, &params).unwrap();
        let after = agent.alarm_probability(&probe).unwrap();
        assert!(after < before, "{after} >= {before}");
        let early = OutcomeSummary::from_evaluations(&run.evaluations[..100]).alarm_rate;
        let late = OutcomeSummary::from_evaluations(&run.evaluations[900..]).alarm_rate;
        assert!(late < early, "{late} >= {early}");
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let s = stream(40, 2);
        let params = CostParameters::with_ratios(0.0, 0.0, 1.0).unwrap();
        let mut agent = OnlineAgent::new(HyperParameters::default(), 11).unwrap();
        let first = s.slice(0..20).unwrap();
        let second = s.slice(20..40).unwrap();
        run_stream(&first, &mut agent, &params).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        save_checkpoint(&agent, &path).unwrap();
        let mut restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored.checkpoint(), agent.checkpoint());

        let a = run_stream(&second, &mut agent, &params).unwrap();
        let b = run_stream(&second, &mut restored, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(restored.cases_seen(), 40);

        let mut ckpt = agent.checkpoint();
        ckpt.format = "other/9".into();
        assert!(OnlineAgent::from_checkpoint(ckpt).is_err());
    }

    #[test]
    fn learning_curve_windows() {
        let s = stream(150, 2);
        let params = CostParameters::with_ratios(0.0, 0.0, 1.0).unwrap();
        let evals: Vec<CaseEvaluation> = s
            .cases()
            .iter()
            .enumerate()
            .map(|(i, c)| CaseEvaluation::new(c, (i % 2 == 0).then_some(1), &params).unwrap())
            .collect();
        let rewards: Vec<f64> = (0..150).map(|i| i as f64).collect();
        let curve = LearningCurve::from_run(&evals, &rewards);
        assert_eq!(curve.points.len(), 150);
        let last = curve.points[149];
        assert_eq!(last.case_index, 150);
        assert_eq!(last.rolling_reward, (50..150).sum::<usize>() as f64 / 100.0);
        assert_eq!(last.rolling_alarm_rate, 0.5);
        assert_eq!(last.rolling_accurate_alarm_rate, 1.0);
        assert_eq!(last.rolling_earliness, 1.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_learning_curve(&curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 151);
        assert!(text.starts_with("case_index,rolling_reward,"));
    }
}
