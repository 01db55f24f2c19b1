//! Clipped-surrogate PPO update on finished episodes.

use serde::{Deserialize, Serialize};

use super::nn::{clip_grad_norm, Mlp};
use super::{softmax2, AgentParameters, HyperParameters, RlAction, RlState, PROB_FLOOR};
use crate::{Error, Result};

/// One decision of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: RlState,
    pub action: RlAction,
    /// Log-probability of `action` under the policy that sampled it.
    pub log_prob: f64,
    /// Critic estimate at sampling time.
    pub value: f64,
    pub reward: f64,
}

/// Decisions of one case in order; only the last step carries a reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal_reward(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.reward)
    }
}

/// Training sample derived from a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSample {
    pub state: RlState,
    pub action: RlAction,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Floored log-probability of `action` and its gradient w.r.t. the logits.
fn log_prob_and_grad(logits: &[f64], action: RlAction) -> (f64, [f64; 2]) {
    let probs = softmax2(logits);
    let a = action.index();
    if probs[a] < PROB_FLOOR {
        return (PROB_FLOOR.ln(), [0.0; 2]);
    }
    let mut grad = [-probs[0], -probs[1]];
    grad[a] += 1.0;
    (probs[a].ln(), grad)
}

pub(crate) fn log_prob(logits: &[f64], action: RlAction) -> f64 {
    log_prob_and_grad(logits, action).0
}

/// Negative mean clipped surrogate and its gradient w.r.t. the actor parameters.
pub fn actor_loss_and_grad(actor: &Mlp, samples: &[PpoSample], eps: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; actor.params().len()];
    let n = samples.len().max(1) as f64;
    let mut loss = 0.0;
    for s in samples {
        let acts = actor.forward_cached(&s.state.to_input());
        let (logp, dlogp) = log_prob_and_grad(acts.output(), s.action);
        let ratio = (logp - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage;
        loss -= unclipped.min(clipped) / n;
        // The gradient flows only through the unclipped branch when it is the minimum.
        if unclipped <= clipped && s.advantage != 0.0 {
            let dloss_dlogp = -s.advantage * ratio / n;
            let g_out = [dloss_dlogp * dlogp[0], dloss_dlogp * dlogp[1]];
            actor.backward(&acts, &g_out, &mut grad);
        }
    }
    (loss, grad)
}

/// Mean of `0.5 (V(s) - G)^2` and its gradient w.r.t. the critic parameters.
pub fn critic_loss_and_grad(critic: &Mlp, samples: &[PpoSample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; critic.params().len()];
    let n = samples.len().max(1) as f64;
    let mut loss = 0.0;
    for s in samples {
        let acts = critic.forward_cached(&s.state.to_input());
        let err = acts.output()[0] - s.ret;
        loss += 0.5 * err * err / n;
        if err != 0.0 {
            critic.backward(&acts, &[err / n], &mut grad);
        }
    }
    (loss, grad)
}

fn samples_from(batch: &[Trajectory], gamma: f64) -> Vec<PpoSample> {
    batch
        .iter()
        .flat_map(|traj| {
            let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
            let returns = returns_to_go(&rewards, gamma);
            traj.steps
                .iter()
                .zip(returns)
                .map(|(s, ret)| PpoSample {
                    state: s.state,
                    action: s.action,
                    old_log_prob: s.log_prob,
                    advantage: ret - s.value,
                    ret,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn check_finite(what: &str, loss: f64, grad: &[f64]) -> Result<()> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        let bad = grad.iter().filter(|g| !g.is_finite()).count();
        Err(Error::Update(format!(
            "{what} produced a non-finite loss ({loss}) or {bad} non-finite gradient entries"
        )))
    }
}

/// Runs `update_epochs` full-batch passes of the clipped actor objective and
/// the critic regression. Advantages are `G_t - V_old(s_t)`, fixed for the
/// whole update.
pub fn ppo_update(
    params: &mut AgentParameters,
    batch: &[Trajectory],
    hyper: &HyperParameters,
) -> Result<UpdateStats> {
    let samples = samples_from(batch, hyper.gamma);
    if samples.is_empty() {
        return Err(Error::Update("empty trajectory batch".into()));
    }
    let mut stats = UpdateStats::default();
    for _ in 0..hyper.update_epochs {
        let (actor_loss, mut actor_grad) = actor_loss_and_grad(&params.actor, &samples, hyper.clip_epsilon);
        check_finite("actor", actor_loss, &actor_grad)?;
        let (critic_loss, mut critic_grad) = critic_loss_and_grad(&params.critic, &samples);
        check_finite("critic", critic_loss, &critic_grad)?;

        stats.actor_loss = actor_loss;
        stats.critic_loss = critic_loss;
        stats.actor_grad_norm = clip_grad_norm(&mut actor_grad, hyper.max_grad_norm);
        stats.critic_grad_norm = clip_grad_norm(&mut critic_grad, hyper.max_grad_norm);
        if stats.actor_grad_norm > 0.0 {
            params.actor_opt.step(params.actor.params_mut(), &actor_grad);
        }
        if stats.critic_grad_norm > 0.0 {
            params.critic_opt.step(params.critic.params_mut(), &critic_grad);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::policy_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(delta: f64) -> RlState {
        RlState {
            delta,
            rho: 0.9,
            tau: 0.5,
            d: 0.2,
            v: 0.8,
        }
    }

    #[test]
    fn surrogate_clips_ratio() {
        assert!((clipped_surrogate(2.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(2.0, -1.0, 0.2) + 2.0).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn clipped_branch_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut actor = Mlp::new(&[5, 4, 4, 2], &mut rng);
        for p in actor.params_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let logits = actor.forward(&state(0.3).to_input());
        let logp = log_prob(&logits, RlAction::Alarm);
        // Ratio 2 with a positive advantage sits on the flat clipped branch.
        let sample = PpoSample {
            state: state(0.3),
            action: RlAction::Alarm,
            old_log_prob: logp - 2f64.ln(),
            advantage: 1.0,
            ret: 1.0,
        };
        let (loss, grad) = actor_loss_and_grad(&actor, &[sample], 0.2);
        assert!((loss + 1.2).abs() < 1e-12);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn returns_are_undiscounted_terminal_reward() {
        assert_eq!(returns_to_go(&[0.0, 0.0, 1.5], 1.0), vec![1.5, 1.5, 1.5]);
        assert_eq!(returns_to_go(&[0.0, 2.0], 0.5), vec![1.0, 2.0]);
    }

    fn single_step(params: &AgentParameters, s: RlState, action: RlAction, reward: f64) -> Trajectory {
        let logits = params.actor.forward(&s.to_input());
        let value = params.critic.forward(&s.to_input())[0];
        Trajectory {
            steps: vec![Step {
                state: s,
                action,
                log_prob: log_prob(&logits, action),
                value,
                reward,
            }],
        }
    }

    #[test]
    fn zero_advantages_leave_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = AgentParameters::new(16, 3e-4, &mut rng);
        // Fresh critic outputs 0, so a zero reward means a zero advantage.
        let traj = single_step(&params, state(0.2), RlAction::Alarm, 0.0);
        let before = params.clone();
        ppo_update(&mut params, &[traj], &HyperParameters::default()).unwrap();
        assert_eq!(params.actor.params(), before.actor.params());
        assert_eq!(params.critic.params(), before.critic.params());
    }

    #[test]
    fn positive_reward_reinforces_alarm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = AgentParameters::new(8, 1e-3, &mut rng);
        let s = state(0.6);
        let before = policy_forward(&params, &s).unwrap().0[0];
        let traj = single_step(&params, s, RlAction::Alarm, 1.0);
        ppo_update(&mut params, &[traj], &HyperParameters::default()).unwrap();
        let after = policy_forward(&params, &s).unwrap().0[0];
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn negative_reward_discourages_alarm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = AgentParameters::new(8, 1e-3, &mut rng);
        let s = state(0.6);
        let before = policy_forward(&params, &s).unwrap().0[0];
        let traj = single_step(&params, s, RlAction::Alarm, -3.0);
        ppo_update(&mut params, &[traj], &HyperParameters::default()).unwrap();
        let after = policy_forward(&params, &s).unwrap().0[0];
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = AgentParameters::new(4, 3e-4, &mut rng);
        assert!(matches!(
            ppo_update(&mut params, &[], &HyperParameters::default()),
            Err(Error::Update(_))
        ));
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = AgentParameters::new(4, 3e-4, &mut rng);
        let mut traj = single_step(&params, state(0.1), RlAction::NoAlarm, 1.0);
        traj.steps[0].value = f64::NAN;
        assert!(matches!(
            ppo_update(&mut params, &[traj], &HyperParameters::default()),
            Err(Error::Update(_))
        ));
    }
}
