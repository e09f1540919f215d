//! Built-in toy environments with scripted behavior policies.
//!
//! * `pointmass2d`: a damped point mass in the unit box that must reach and
//!   hold a goal in the far corner. State `(x, y, vx, vy)`, action a bounded
//!   2-D acceleration, 100-step episodes.
//! * `sinewalker1d`: a walker on a circle observed only through
//!   `(cos theta, sin theta)`. The expert advances its phase at a constant rate;
//!   every policy visits the circle uniformly, so a single observation says
//!   nothing about expertise while a few consecutive ones do. Its random
//!   policy holds each uniform action for a random stretch (see
//!   [`ScriptedActor`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvSpec {
    #[serde(rename = "pointmass2d")]
    PointMass2d,
    #[serde(rename = "sinewalker1d")]
    SineWalker1d,
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass2d" => Ok(EnvSpec::PointMass2d),
            "sinewalker1d" => Ok(EnvSpec::SineWalker1d),
            other => Err(Error::config(format!(
                "unknown environment `{other}` (expected pointmass2d or sinewalker1d)"
            ))),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvSpec::PointMass2d => "pointmass2d",
            EnvSpec::SineWalker1d => "sinewalker1d",
        })
    }
}

/// Scripted behavior policy families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Expert,
    Medium,
    Random,
}

impl PolicyKind {
    pub(crate) fn stream(self) -> u64 {
        match self {
            PolicyKind::Expert => 1,
            PolicyKind::Medium => 2,
            PolicyKind::Random => 3,
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyKind::Expert),
            "medium" => Ok(PolicyKind::Medium),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::config(format!("unknown policy kind `{other}`"))),
        }
    }
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next_state: Vec<f32>,
    pub reward: f64,
    pub terminal: bool,
}

/// Return statistics of the two scripted anchors, frozen from 2000-episode
/// rollouts (see `reference_returns_match_rollouts` in the tests).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

const PM_DT: f32 = 0.1;
const PM_DRAG: f32 = 0.9;
const PM_GAIN: f32 = 0.2;
const PM_START: [f32; 2] = [-0.8, -0.8];
const PM_START_JITTER: f32 = 0.1;
const PM_GOAL: [f32; 2] = [0.8, 0.8];
const PM_GOAL_RADIUS: f32 = 0.1;
const PM_KP: f32 = 2.0;
const PM_KD: f32 = 2.0;

const SW_STEP: f32 = 0.3;
const SW_TARGET: f32 = 0.6;
const SW_PHASE_NOISE: f32 = 0.02;
const SW_SUCCESS_ERR: f64 = 0.1;
/// Mean number of steps the sinewalker random policy holds one action.
const SW_RANDOM_HOLD: f64 = 50.0;

const MEDIUM_NOISE_STD: f32 = 0.5;
pub const EPISODE_LEN: usize = 100;

impl EnvSpec {
    pub fn state_dim(self) -> usize {
        match self {
            EnvSpec::PointMass2d => 4,
            EnvSpec::SineWalker1d => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvSpec::PointMass2d => 2,
            EnvSpec::SineWalker1d => 1,
        }
    }

    pub fn episode_len(self) -> usize {
        EPISODE_LEN
    }

    /// The built-in environment with these dimensions. An `action_dim` of 0
    /// (observation-only data) matches any environment with that state size.
    pub fn for_dims(state_dim: usize, action_dim: usize) -> Option<EnvSpec> {
        [EnvSpec::PointMass2d, EnvSpec::SineWalker1d]
            .into_iter()
            .find(|e| {
                e.state_dim() == state_dim && (action_dim == 0 || e.action_dim() == action_dim)
            })
    }

    pub fn reference_returns(self) -> ReferenceReturns {
        match self {
            EnvSpec::PointMass2d => ReferenceReturns {
                random: -191.92,
                expert: -30.76,
            },
            EnvSpec::SineWalker1d => ReferenceReturns {
                random: -67.85,
                expert: 0.0,
            },
        }
    }

    pub fn normalized_score(self, ret: f64) -> f64 {
        let r = self.reference_returns();
        100.0 * (ret - r.random) / (r.expert - r.random)
    }

    pub fn make(self) -> ToyEnv {
        ToyEnv {
            spec: self,
            state: vec![0.0; self.state_dim()],
            phase: 0.0,
            t: 0,
            tracking_error: 0.0,
        }
    }
}

/// Mutable environment instance.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    spec: EnvSpec,
    state: Vec<f32>,
    phase: f32,
    t: usize,
    tracking_error: f64,
}

impl ToyEnv {
    pub fn spec(&self) -> EnvSpec {
        self.spec
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f32> {
        self.t = 0;
        self.tracking_error = 0.0;
        match self.spec {
            EnvSpec::PointMass2d => {
                let jx = rng.random_range(-PM_START_JITTER..PM_START_JITTER);
                let jy = rng.random_range(-PM_START_JITTER..PM_START_JITTER);
                self.state = vec![PM_START[0] + jx, PM_START[1] + jy, 0.0, 0.0];
            }
            EnvSpec::SineWalker1d => {
                self.phase = rng.random_range(0.0..std::f32::consts::TAU);
                self.state = vec![self.phase.cos(), self.phase.sin()];
            }
        }
        self.state.clone()
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: &[f32], rng: &mut R) -> StepOutcome {
        assert_eq!(action.len(), self.spec.action_dim(), "action dimension");
        self.t += 1;
        match self.spec {
            EnvSpec::PointMass2d => {
                let mut s = [self.state[0], self.state[1], self.state[2], self.state[3]];
                for i in 0..2 {
                    let a = action[i].clamp(-1.0, 1.0);
                    s[2 + i] = PM_DRAG * s[2 + i] + PM_GAIN * a;
                    s[i] += PM_DT * s[2 + i];
                    if s[i].abs() > 1.0 {
                        s[i] = s[i].clamp(-1.0, 1.0);
                        s[2 + i] = 0.0;
                    }
                }
                self.state = s.to_vec();
                let dist = goal_distance(&self.state);
                StepOutcome {
                    next_state: self.state.clone(),
                    reward: -dist,
                    terminal: false,
                }
            }
            EnvSpec::SineWalker1d => {
                let a = action[0].clamp(-1.0, 1.0);
                let noise = Normal::new(0.0, SW_PHASE_NOISE).unwrap().sample(rng);
                self.phase = (self.phase + SW_STEP * a + noise).rem_euclid(std::f32::consts::TAU);
                self.state = vec![self.phase.cos(), self.phase.sin()];
                let err = (a - SW_TARGET).abs() as f64;
                self.tracking_error += err;
                StepOutcome {
                    next_state: self.state.clone(),
                    reward: -err,
                    terminal: false,
                }
            }
        }
    }

    /// Success criterion for the episode that just ended.
    pub fn success(&self) -> bool {
        match self.spec {
            EnvSpec::PointMass2d => goal_distance(&self.state) < PM_GOAL_RADIUS as f64,
            EnvSpec::SineWalker1d => self.tracking_error / self.t.max(1) as f64 <= SW_SUCCESS_ERR,
        }
    }
}

fn goal_distance(state: &[f32]) -> f64 {
    let dx = (state[0] - PM_GOAL[0]) as f64;
    let dy = (state[1] - PM_GOAL[1]) as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Action of a scripted policy at a raw (unnormalized) state.
pub fn scripted_action<R: Rng + ?Sized>(
    spec: EnvSpec,
    kind: PolicyKind,
    state: &[f32],
    rng: &mut R,
) -> Vec<f32> {
    let da = spec.action_dim();
    match kind {
        PolicyKind::Random => (0..da).map(|_| rng.random_range(-1.0f32..=1.0)).collect(),
        PolicyKind::Expert => expert_action(spec, state),
        PolicyKind::Medium => {
            let noise = Normal::new(0.0, MEDIUM_NOISE_STD).unwrap();
            expert_action(spec, state)
                .into_iter()
                .map(|a| (a + noise.sample(rng)).clamp(-1.0, 1.0))
                .collect()
        }
    }
}

/// A scripted policy with per-episode memory, used to collect datasets.
///
/// The sinewalker random policy redraws its uniform action with probability
/// `1 / SW_RANDOM_HOLD` per step and otherwise repeats it, so random windows
/// cover the whole range of phase velocities. Its per-step action marginal is
/// the same uniform distribution as the memoryless [`scripted_action`]. Every
/// other policy is memoryless.
#[derive(Clone, Debug)]
pub struct ScriptedActor {
    spec: EnvSpec,
    kind: PolicyKind,
    held: Option<Vec<f32>>,
}

impl ScriptedActor {
    /// A fresh actor; create one per episode.
    pub fn new(spec: EnvSpec, kind: PolicyKind) -> Self {
        ScriptedActor {
            spec,
            kind,
            held: None,
        }
    }

    pub fn act<R: Rng + ?Sized>(&mut self, state: &[f32], rng: &mut R) -> Vec<f32> {
        if self.spec != EnvSpec::SineWalker1d || self.kind != PolicyKind::Random {
            return scripted_action(self.spec, self.kind, state, rng);
        }
        match &self.held {
            Some(a) if !rng.random_bool(1.0 / SW_RANDOM_HOLD) => a.clone(),
            _ => {
                let a = scripted_action(self.spec, self.kind, state, rng);
                self.held = Some(a.clone());
                a
            }
        }
    }
}

fn expert_action(spec: EnvSpec, state: &[f32]) -> Vec<f32> {
    match spec {
        EnvSpec::PointMass2d => (0..2)
            .map(|i| (PM_KP * (PM_GOAL[i] - state[i]) - PM_KD * state[2 + i]).clamp(-1.0, 1.0))
            .collect(),
        EnvSpec::SineWalker1d => vec![SW_TARGET],
    }
}

/// One rolled-out episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub success: bool,
}

impl Episode {
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rolls out `policy` for at most `max_len` steps. `states[t]` is the state the
/// action `actions[t]` was taken in.
pub fn rollout<R, P>(spec: EnvSpec, max_len: usize, rng: &mut R, mut policy: P) -> Episode
where
    R: Rng + ?Sized,
    P: FnMut(&[f32], &mut R) -> Vec<f32>,
{
    let mut env = spec.make();
    let mut s = env.reset(rng);
    let mut ep = Episode {
        states: Vec::with_capacity(max_len),
        actions: Vec::with_capacity(max_len),
        rewards: Vec::with_capacity(max_len),
        terminated: false,
        success: false,
    };
    for _ in 0..max_len {
        let a = policy(&s, rng);
        let out = env.step(&a, rng);
        ep.states.push(s);
        ep.actions.push(a);
        ep.rewards.push(out.reward);
        s = out.next_state;
        if out.terminal {
            ep.terminated = true;
            break;
        }
    }
    ep.success = env.success();
    ep
}
