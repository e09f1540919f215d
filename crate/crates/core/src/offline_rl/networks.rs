use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::nncore::{Activation, Bound, Graph, Mlp, ParamSet, Var};
use crate::trajdata::{scripted_action, EnvSpec, Normalizer, PolicyKind};

/// Offline RL learner family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Behavior-regularized twin-critic actor-critic with reward-weighted BC.
    Rebrac,
    /// Expectile-based implicit Q-learning.
    Iql,
    /// Plain behavior cloning on every transition.
    Bc,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rebrac" => Ok(Backbone::Rebrac),
            "iql" => Ok(Backbone::Iql),
            "bc" => Ok(Backbone::Bc),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected rebrac, iql or bc)"
            ))),
        }
    }
}

/// Shapes of every network in a [`PolicyBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Empty when the backbone has no value network.
    pub value_hidden: Vec<usize>,
    pub critic_layer_norm: bool,
    /// Gaussian actor head with a learned state-independent log-std.
    pub gaussian_actor: bool,
    pub twin_critics: bool,
    pub target_actor: bool,
}

/// One network: its layer structure and parameters.
#[derive(Clone, Debug)]
pub struct Net {
    pub mlp: Mlp,
    pub params: ParamSet<f32>,
}

impl Net {
    fn new(
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        layer_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            name,
            input,
            hidden,
            output,
            Activation::Relu,
            layer_norm,
            rng,
        );
        Net { mlp, params }
    }
}

pub const LOG_STD_MIN: f32 = -5.0;
pub const LOG_STD_MAX: f32 = 2.0;

/// Actor, critics, optional value function and target copies.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub backbone: Backbone,
    pub arch: Architecture,
    pub state_dim: usize,
    pub action_dim: usize,
    pub actor: Net,
    /// Parameter id of the log-std vector inside `actor.params`.
    pub log_std: Option<usize>,
    pub actor_target: Option<ParamSet<f32>>,
    pub q1: Option<Net>,
    pub q2: Option<Net>,
    pub q1_target: Option<ParamSet<f32>>,
    pub q2_target: Option<ParamSet<f32>>,
    pub value: Option<Net>,
    pub obs_normalizer: Option<Normalizer>,
    pub step: u64,
}

/// Inputs are `[n, d]`; outputs of scalar heads are flattened to `[n]`.
pub(crate) fn scalar_head(g: &mut Graph<f32>, mlp: &Mlp, p: &Bound, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let out = mlp.forward(g, p, x)?;
    Ok(g.reshape(out, &[n]))
}

pub(crate) fn q_value(g: &mut Graph<f32>, mlp: &Mlp, p: &Bound, s: Var, a: Var) -> Result<Var> {
    let sa = g.concat(s, a, 1);
    scalar_head(g, mlp, p, sa)
}

pub(crate) fn constant2(g: &mut Graph<f32>, x: &Array2<f32>) -> Var {
    g.constant(x.clone().into_dyn())
}

pub(crate) fn to_array1(v: &ArrayD<f32>) -> Array1<f32> {
    v.iter().copied().collect()
}

pub(crate) fn to_array2(v: &ArrayD<f32>) -> Array2<f32> {
    v.clone().into_dimensionality().expect("2-D tensor")
}

impl PolicyBundle {
    pub fn new(
        backbone: Backbone,
        arch: Architecture,
        state_dim: usize,
        action_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut actor = Net::new(
            "actor",
            state_dim,
            &arch.actor_hidden,
            action_dim,
            false,
            rng,
        );
        actor.mlp = actor.mlp.with_output_activation(Activation::Tanh);
        let log_std = arch.gaussian_actor.then(|| {
            actor
                .params
                .add("actor.log_std", ArrayD::zeros(IxDyn(&[action_dim])))
        });
        let actor_target = arch.target_actor.then(|| actor.params.clone());
        let (q1, q2) = if arch.critic_hidden.is_empty() {
            (None, None)
        } else {
            let q1 = Net::new(
                "q1",
                state_dim + action_dim,
                &arch.critic_hidden,
                1,
                arch.critic_layer_norm,
                rng,
            );
            let q2 = arch.twin_critics.then(|| {
                Net::new(
                    "q2",
                    state_dim + action_dim,
                    &arch.critic_hidden,
                    1,
                    arch.critic_layer_norm,
                    rng,
                )
            });
            (Some(q1), q2)
        };
        let value = (!arch.value_hidden.is_empty())
            .then(|| Net::new("value", state_dim, &arch.value_hidden, 1, false, rng));
        PolicyBundle {
            backbone,
            q1_target: q1.as_ref().map(|n| n.params.clone()),
            q2_target: q2.as_ref().map(|n| n.params.clone()),
            arch,
            state_dim,
            action_dim,
            actor,
            log_std,
            actor_target,
            q1,
            q2,
            value,
            obs_normalizer: None,
            step: 0,
        }
    }

    /// Deterministic actions `[n, d_a]` for already-normalized states.
    pub fn act_normalized(&self, states: &Array2<f32>) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let p = self.actor.params.bind_frozen(&mut g);
        let s = constant2(&mut g, states);
        let a = self.actor.mlp.forward(&mut g, &p, s)?;
        Ok(to_array2(g.value(a)))
    }

    /// Deterministic actions for raw environment states.
    pub fn act(&self, raw_states: &Array2<f32>) -> Result<Array2<f32>> {
        match &self.obs_normalizer {
            Some(n) => self.act_normalized(&n.normalize(raw_states)),
            None => self.act_normalized(raw_states),
        }
    }

    fn param_sets(&self) -> Vec<(&'static str, &ParamSet<f32>)> {
        let mut v = vec![("actor", &self.actor.params)];
        let opt = [
            ("actor_target", self.actor_target.as_ref()),
            ("q1", self.q1.as_ref().map(|n| &n.params)),
            ("q2", self.q2.as_ref().map(|n| &n.params)),
            ("q1_target", self.q1_target.as_ref()),
            ("q2_target", self.q2_target.as_ref()),
            ("value", self.value.as_ref().map(|n| &n.params)),
        ];
        v.extend(opt.into_iter().filter_map(|(k, p)| p.map(|p| (k, p))));
        v
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet<f32>> {
        let mut v = vec![&mut self.actor.params];
        v.extend(self.actor_target.as_mut());
        v.extend(self.q1.as_mut().map(|n| &mut n.params));
        v.extend(self.q2.as_mut().map(|n| &mut n.params));
        v.extend(self.q1_target.as_mut());
        v.extend(self.q2_target.as_mut());
        v.extend(self.value.as_mut().map(|n| &mut n.params));
        v
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = BundleHeader {
            format: POLICY_FORMAT.into(),
            backbone: self.backbone,
            arch: self.arch.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            obs_normalizer: self.obs_normalizer.clone(),
            step: self.step,
            sets: self
                .param_sets()
                .iter()
                .map(|(k, p)| ((*k).to_string(), p.num_scalars()))
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, ps) in self.param_sets() {
            for p in ps.iter() {
                fsutil::write_f32s(&mut out, p.value.iter().copied())?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = std::io::Cursor::new(bytes);
        let line = fsutil::read_header_line(&mut r)?;
        let h: BundleHeader = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("policy header: {e}")))?;
        if h.format != POLICY_FORMAT {
            return Err(Error::format(format!(
                "unsupported policy format {}",
                h.format
            )));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut b = PolicyBundle::new(h.backbone, h.arch, h.state_dim, h.action_dim, &mut rng);
        let expected: Vec<(String, usize)> = b
            .param_sets()
            .iter()
            .map(|(k, p)| ((*k).to_string(), p.num_scalars()))
            .collect();
        if expected != h.sets {
            return Err(Error::format(
                "policy parameter layout does not match its architecture",
            ));
        }
        for ps in b.param_sets_mut() {
            for p in ps.iter_mut() {
                let v = fsutil::read_f32s(&mut r, p.value.len())?;
                p.value = ArrayD::from_shape_vec(p.value.raw_dim(), v).expect("sized");
            }
        }
        fsutil::expect_eof(&mut r)?;
        b.obs_normalizer = h.obs_normalizer;
        b.step = h.step;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        fsutil::atomic_write(path, &bytes)?;
        Ok(fsutil::short_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const POLICY_FORMAT: &str = "tge-policy/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    format: String,
    backbone: Backbone,
    arch: Architecture,
    state_dim: usize,
    action_dim: usize,
    obs_normalizer: Option<Normalizer>,
    step: u64,
    sets: Vec<(String, usize)>,
}

/// Anything that maps a batch of raw states to actions. Each row has its own
/// RNG so that stochastic policies stay reproducible per episode.
pub trait Policy: Sync {
    fn act_batch(&self, raw_states: &Array2<f32>, rngs: &mut [ChaCha8Rng]) -> Result<Array2<f32>>;
}

impl Policy for PolicyBundle {
    fn act_batch(&self, raw_states: &Array2<f32>, _rngs: &mut [ChaCha8Rng]) -> Result<Array2<f32>> {
        self.act(raw_states)
    }
}

/// One of the environment's scripted behavior policies.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedPolicy {
    pub env: EnvSpec,
    pub kind: PolicyKind,
}

impl Policy for ScriptedPolicy {
    fn act_batch(&self, raw_states: &Array2<f32>, rngs: &mut [ChaCha8Rng]) -> Result<Array2<f32>> {
        let da = self.env.action_dim();
        let mut out = Array2::zeros((raw_states.nrows(), da));
        for (i, rng) in rngs.iter_mut().enumerate().take(raw_states.nrows()) {
            let s: Vec<f32> = raw_states.row(i).to_vec();
            let a = scripted_action(self.env, self.kind, &s, rng);
            out.row_mut(i).assign(&Array1::from(a));
        }
        Ok(out)
    }
}

/// Clipped Gaussian exploration noise, `clip(N(0, sigma), -c, c)`.
pub(crate) fn clipped_noise<R: Rng + ?Sized>(
    shape: (usize, usize),
    sigma: f64,
    clip: f64,
    rng: &mut R,
) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        (e * sigma).clamp(-clip, clip) as f32
    })
}
