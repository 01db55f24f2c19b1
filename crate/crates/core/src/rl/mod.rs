//! Online reinforcement learning with artificial curiosity.
//!
//! Every case is one episode. At each prefix the agent observes
//! `(delta, rho, tau, d, v)` and samples whether to raise an alarm. The
//! episode ends at the first alarm or at the last prefix with a single
//! terminal reward:
//!
//! - silent on a deviating case: `-1`
//! - silent on a clean case: `+1.5`
//! - alarm (either outcome): `b * (1 - c) - 2 * d`
//!
//! An alarm never reveals whether the case would have deviated, so the alarm
//! reward is intrinsic: `d` is the recent adaptation rate, `b` favours early
//! alarms, and the curiosity modifier `c` (driven by the negative predictive
//! value `v` of recent silences) pushes towards later alarms while silences
//! are unreliable. The policy is trained with PPO after every episode.

mod agent;
pub mod nn;
mod ppo;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use agent::{
    load_checkpoint, run_case, run_stream, save_checkpoint, write_learning_curve, CaseRun, Checkpoint,
    CurvePoint, LearningCurve, OnlineAgent, RlRun, RngState, CHECKPOINT_FORMAT_TAG,
};
pub use nn::{Adam, Mlp};
pub use ppo::{
    actor_loss_and_grad, clipped_surrogate, critic_loss_and_grad, ppo_update, returns_to_go, PpoSample, Step,
    Trajectory, UpdateStats,
};

/// Size of the adaptation-rate window.
pub const ADAPTATION_WINDOW: usize = 30;
/// Size of the negative-predictive-value window over non-adapted cases.
pub const NPV_WINDOW: usize = 100;
/// Window of the rolling learning-curve metrics.
pub const CURVE_WINDOW: usize = 100;
/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

pub const STATE_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlState {
    pub delta: f64,
    pub rho: f64,
    pub tau: f64,
    /// Adaptation rate over the last 30 cases.
    pub d: f64,
    /// Negative predictive value over the last 100 non-adapted cases.
    pub v: f64,
}

impl RlState {
    pub fn to_input(&self) -> [f64; STATE_DIM] {
        [self.delta, self.rho, self.tau, self.d, self.v]
    }

    pub fn is_finite(&self) -> bool {
        self.to_input().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RlAction {
    Alarm,
    NoAlarm,
}

impl RlAction {
    /// Position of the action in the actor's output.
    pub fn index(self) -> usize {
        match self {
            RlAction::Alarm => 0,
            RlAction::NoAlarm => 1,
        }
    }
}

/// Action distribution `[P(alarm), P(no alarm)]`.
pub type ActionProbs = [f64; 2];

/// Curiosity modifier `c = clamp((21 - 30 v) (d - 1/2), 0, 3)`, active only
/// while alarms are frequent (`d > 1/2`) and silence is unreliable (`v < 0.7`).
/// Outside that quadrant both factors share a sign and the raw product would
/// be positive, so it is forced to zero.
pub fn curiosity_c(v: f64, d: f64) -> f64 {
    if d <= 0.5 || v >= 0.7 {
        return 0.0;
    }
    ((-30.0 * v + 21.0) * (d - 0.5)).clamp(0.0, 3.0)
}

/// Earliness coefficient, 1 at the first prefix down to 1/2 at the last.
pub fn earliness_coef_b(j: usize, l: usize) -> f64 {
    if l <= 1 {
        return 1.0;
    }
    1.0 - (j.saturating_sub(1)) as f64 / (2.0 * (l - 1) as f64)
}

pub fn terminal_reward(adapted: bool, deviation: bool, b: f64, c: f64, d: f64) -> f64 {
    match (adapted, deviation) {
        (true, _) => b * (1.0 - c) - 2.0 * d,
        (false, true) => -1.0,
        (false, false) => 1.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NpvLabel {
    /// Silent on a clean case.
    TrueNegative,
    /// Silent on a deviating case.
    FalseNegative,
}

/// Sliding windows feeding `d` and `v`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CuriosityTracker {
    adaptations: VecDeque<bool>,
    npv: VecDeque<NpvLabel>,
}

impl CuriosityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adaptation rate over the window; 0 while empty.
    pub fn d(&self) -> f64 {
        if self.adaptations.is_empty() {
            return 0.0;
        }
        self.adaptations.iter().filter(|&&a| a).count() as f64 / self.adaptations.len() as f64
    }

    /// `TN / (TN + FN)` over the last [`NPV_WINDOW`] silences. Until the window
    /// is full the missing slots count as unconfirmed, so the estimate starts
    /// at 0 and a handful of early true negatives cannot switch curiosity off.
    pub fn v(&self) -> f64 {
        let tn = self.npv.iter().filter(|&&l| l == NpvLabel::TrueNegative).count();
        tn as f64 / NPV_WINDOW as f64
    }

    pub fn observe(&mut self, adapted: bool, deviation: bool) {
        if self.adaptations.len() == ADAPTATION_WINDOW {
            self.adaptations.pop_front();
        }
        self.adaptations.push_back(adapted);
        if !adapted {
            if self.npv.len() == NPV_WINDOW {
                self.npv.pop_front();
            }
            self.npv.push_back(if deviation {
                NpvLabel::FalseNegative
            } else {
                NpvLabel::TrueNegative
            });
        }
    }

    pub fn adaptation_window(&self) -> impl Iterator<Item = bool> + '_ {
        self.adaptations.iter().copied()
    }

    pub fn npv_window(&self) -> impl Iterator<Item = NpvLabel> + '_ {
        self.npv.iter().copied()
    }
}

/// PPO settings. Only `gamma` and the network shape are prescribed; the rest
/// are common PPO defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParameters {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub update_epochs: usize,
    pub hidden_width: usize,
    /// Global gradient-norm cap per network; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for HyperParameters {
    fn default() -> Self {
        HyperParameters {
            gamma: 1.0,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            update_epochs: 4,
            hidden_width: 64,
            max_grad_norm: 0.5,
        }
    }
}

impl HyperParameters {
    pub fn validate(&self) -> Result<()> {
        if self.gamma != 1.0 {
            return Err(Error::Config(format!(
                "episodes end with their only reward; gamma must be 1, got {}",
                self.gamma
            )));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon {} outside (0, 1)",
                self.clip_epsilon
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.update_epochs == 0 || self.hidden_width == 0 {
            return Err(Error::Config(
                "update_epochs and hidden_width must be positive".into(),
            ));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config(format!(
                "invalid max_grad_norm {}",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// Actor and critic networks with their optimiser states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParameters {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl AgentParameters {
    /// Two hidden layers of `width` units for both networks. Output layers
    /// start at zero, so the initial policy is uniform.
    pub fn new<R: Rng + ?Sized>(width: usize, learning_rate: f64, rng: &mut R) -> Self {
        let actor = Mlp::new(&[STATE_DIM, width, width, 2], rng);
        let critic = Mlp::new(&[STATE_DIM, width, width, 1], rng);
        let actor_opt = Adam::new(actor.params().len(), learning_rate);
        let critic_opt = Adam::new(critic.params().len(), learning_rate);
        AgentParameters {
            actor,
            critic,
            actor_opt,
            critic_opt,
        }
    }

    pub fn from_hyper<R: Rng + ?Sized>(hyper: &HyperParameters, rng: &mut R) -> Self {
        Self::new(hyper.hidden_width, hyper.learning_rate, rng)
    }
}

/// Numerically stable two-way softmax.
pub(crate) fn softmax2(logits: &[f64]) -> ActionProbs {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn policy_forward(params: &AgentParameters, state: &RlState) -> Result<(ActionProbs, f64)> {
    if !state.is_finite() {
        return Err(Error::domain(format!("non-finite RL state {state:?}")));
    }
    let input = state.to_input();
    let probs = softmax2(&params.actor.forward(&input));
    let value = params.critic.forward(&input)[0];
    Ok((probs, value))
}

pub fn select_action<R: Rng + ?Sized>(probs: &ActionProbs, rng: &mut R) -> RlAction {
    if rng.gen::<f64>() < probs[RlAction::Alarm.index()] {
        RlAction::Alarm
    } else {
        RlAction::NoAlarm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn curiosity_examples() {
        assert_eq!(curiosity_c(0.7, 1.0), 0.0);
        assert_eq!(curiosity_c(0.0, 0.5), 0.0);
        assert_eq!(curiosity_c(0.0, 1.0), 3.0);
        assert!((curiosity_c(0.6, 1.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn earliness_coefficient() {
        assert_eq!(earliness_coef_b(1, 10), 1.0);
        assert_eq!(earliness_coef_b(10, 10), 0.5);
        assert_eq!(earliness_coef_b(1, 1), 1.0);
    }

    #[test]
    fn reward_table() {
        assert_eq!(terminal_reward(false, false, 0.7, 2.0, 0.4), 1.5);
        assert_eq!(terminal_reward(false, true, 0.7, 2.0, 0.4), -1.0);
        assert_eq!(terminal_reward(true, true, 1.0, 0.0, 0.0), 1.0);
        assert_eq!(terminal_reward(true, false, 1.0, 0.0, 0.0), 1.0);
        assert_eq!(terminal_reward(true, false, 0.5, 3.0, 1.0), -3.0);
    }

    #[test]
    fn tracker_windows() {
        let mut t = CuriosityTracker::new();
        assert_eq!((t.d(), t.v()), (0.0, 0.0));
        for _ in 0..31 {
            t.observe(true, false);
        }
        assert_eq!(t.d(), 1.0);
        assert_eq!(t.adaptation_window().count(), ADAPTATION_WINDOW);
        assert_eq!(t.npv_window().count(), 0);

        let mut t = CuriosityTracker::new();
        for i in 0..10 {
            t.observe(false, i >= 7);
        }
        // Partially filled: 7 true negatives out of 100 slots.
        assert!((t.v() - 0.07).abs() < 1e-12);
        t.observe(true, true);
        assert_eq!(t.npv_window().count(), 10);
        assert!((t.d() - 1.0 / 11.0).abs() < 1e-12);

        for i in 0..200 {
            t.observe(false, i % 4 == 0);
        }
        assert_eq!(t.npv_window().count(), NPV_WINDOW);
        assert!((t.v() - 0.75).abs() < 1e-12);
        for _ in 0..200 {
            t.observe(false, true);
        }
        assert_eq!(t.v(), 0.0);
    }

    #[test]
    fn uniform_initial_policy_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AgentParameters::new(64, 3e-4, &mut rng);
        let s = RlState {
            delta: 0.4,
            rho: 0.8,
            tau: 0.5,
            d: 0.3,
            v: 0.9,
        };
        let (probs, value) = policy_forward(&params, &s).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
        assert!(value.is_finite());
        assert_eq!(policy_forward(&params, &s).unwrap(), (probs, value));
        let bad = RlState { delta: f64::NAN, ..s };
        assert!(matches!(policy_forward(&params, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn action_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert!((0..1000).all(|_| select_action(&[1.0, 0.0], &mut rng) == RlAction::Alarm));
        assert!((0..1000).all(|_| select_action(&[0.0, 1.0], &mut rng) == RlAction::NoAlarm));
        let alarms = (0..10_000)
            .filter(|_| select_action(&[0.5, 0.5], &mut rng) == RlAction::Alarm)
            .count();
        assert!((alarms as f64 / 10_000.0 - 0.5).abs() <= 0.02);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| select_action(&[0.3, 0.7], &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParameters::default().validate().is_ok());
        let bad = HyperParameters {
            gamma: 0.99,
            ..HyperParameters::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn reward_bounds(adapted in any::<bool>(), dev in any::<bool>(),
                         b in 0.5f64..=1.0, v in 0.0f64..=1.0, d in 0.0f64..=1.0) {
            let c = curiosity_c(v, d);
            prop_assert!((0.0..=3.0).contains(&c));
            let r = terminal_reward(adapted, dev, b, c, d);
            prop_assert!((-4.0..=1.5).contains(&r));
        }

        #[test]
        fn curiosity_shape(v in 0.0f64..=1.0, v2 in 0.0f64..=1.0, d in 0.0f64..=1.0, d2 in 0.0f64..=1.0) {
            if d <= 0.5 || v >= 0.7 {
                prop_assert_eq!(curiosity_c(v, d), 0.0);
            }
            let (vl, vh) = if v <= v2 { (v, v2) } else { (v2, v) };
            if d >= 0.5 {
                prop_assert!(curiosity_c(vl, d) >= curiosity_c(vh, d));
            }
            let (dl, dh) = if d <= d2 { (d, d2) } else { (d2, d) };
            if v <= 0.7 {
                prop_assert!(curiosity_c(v, dl) <= curiosity_c(v, dh));
            }
        }

        #[test]
        fn tracker_stays_in_unit_interval(events in prop::collection::vec((any::<bool>(), any::<bool>()), 0..300)) {
            let mut t = CuriosityTracker::new();
            let mut silent = 0;
            for (a, dev) in events {
                t.observe(a, dev);
                silent += !a as usize;
                prop_assert!((0.0..=1.0).contains(&t.d()));
                prop_assert!((0.0..=1.0).contains(&t.v()));
                prop_assert_eq!(t.npv_window().count(), silent.min(NPV_WINDOW));
            }
        }

        #[test]
        fn probabilities_form_a_distribution(
            seed in 0u64..1000,
            delta in -2.0f64..2.0, rho in 0.5f64..=1.0, tau in 0.01f64..=1.0,
            d in 0.0f64..=1.0, v in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = AgentParameters::new(8, 3e-4, &mut rng);
            for p in params.actor.params_mut() {
                *p = rng.gen_range(-3.0..3.0);
            }
            let (probs, _) = policy_forward(&params, &RlState { delta, rho, tau, d, v }).unwrap();
            prop_assert!(probs.iter().all(|&p| p >= 0.0));
            prop_assert!((probs[0] + probs[1] - 1.0).abs() <= 1e-6);
        }
    }
}
