//! Constrained MDP abstraction, trajectories, returns and the built-in
//! environments.

mod grid;
mod point;

pub use grid::{GridCircleWorld, GridConfig};
pub use point::{PointCircle, PointConfig};

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::TabularCmdp;
use crate::rng::{self, SimRng};

/// Discrete actions are indices, continuous actions are vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Feature encoding used as critic input: one-hot for discrete actions.
    pub fn encode_into(&self, space: &ActionSpace, out: &mut Vec<f64>) {
        match (self, space) {
            (Action::Discrete(i), ActionSpace::Discrete { n }) => {
                out.extend((0..*n).map(|k| if k == *i { 1.0 } else { 0.0 }));
            }
            (Action::Continuous(v), _) => out.extend_from_slice(v),
            (Action::Discrete(i), ActionSpace::Continuous { .. }) => out.push(*i as f64),
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }

    /// Flat numeric view (discrete index as a single value).
    pub fn values(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => vec![*i as f64],
            Action::Continuous(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Width of the critic-input encoding of an action.
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete { n } => *n,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }

    /// Number of scalar columns when an action is written out flat.
    pub fn flat_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete { .. } => 1,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }

    pub fn check(&self, a: &Action) -> Result<()> {
        match (self, a) {
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                if i < n {
                    Ok(())
                } else {
                    Err(Error::ActionBounds(format!("index {i} not in 0..{n}")))
                }
            }
            (ActionSpace::Continuous { low, high }, Action::Continuous(v)) => {
                if v.len() != low.len() {
                    return Err(Error::dim("action", low.len(), v.len()));
                }
                for (k, x) in v.iter().enumerate() {
                    if !(x.is_finite() && *x >= low[k] && *x <= high[k]) {
                        return Err(Error::ActionBounds(format!(
                            "component {k} = {x} outside [{}, {}]",
                            low[k], high[k]
                        )));
                    }
                }
                Ok(())
            }
            _ => Err(Error::ActionBounds(format!(
                "action kind does not match action space: {a:?}"
            ))),
        }
    }

    pub fn sample_uniform(&self, rng: &mut SimRng) -> Action {
        match self {
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..*n)),
            ActionSpace::Continuous { low, high } => Action::Continuous(
                low.iter()
                    .zip(high)
                    .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub gamma: f64,
    pub cost_threshold: f64,
    pub episode_length: usize,
    pub reward_bound: f64,
    pub cost_bound: f64,
    /// Identifier of the initial-state sampler.
    pub initial_state: String,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} not in [0, 1]",
                self.gamma
            )));
        }
        if self.episode_length == 0 {
            return Err(Error::InvalidArgument("episode_length must be >= 1".into()));
        }
        if self.cost_threshold < 0.0 {
            return Err(Error::InvalidArgument("cost threshold must be >= 0".into()));
        }
        if self.obs_dim == 0 {
            return Err(Error::InvalidArgument("obs_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Critic input width: observation followed by the action encoding.
    pub fn critic_input_dim(&self) -> usize {
        self.obs_dim + self.action_space.encoded_dim()
    }
}

/// Critic input vector for `(s, a)`.
pub fn critic_input(space: &ActionSpace, s: &[f64], a: &Action) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + space.encoded_dim());
    x.extend_from_slice(s);
    a.encode_into(space, &mut x);
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub c: f64,
    pub s2: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total(&self, channel: Channel) -> f64 {
        self.transitions.iter().map(|t| channel.pick(t)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Reward,
    Cost,
}

impl Channel {
    pub fn pick(self, t: &Transition) -> f64 {
        match self {
            Channel::Reward => t.r,
            Channel::Cost => t.c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Reseeds the environment and draws an initial state from its
    /// initial-state distribution.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    fn step(&mut self, a: &Action) -> Result<StepOutcome>;

    /// Places the environment in the state described by `obs` at time 0.
    fn inject(&mut self, _obs: &[f64], _seed: u64) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!(
            "state injection for {}",
            self.spec().name
        )))
    }

    /// Observation of a state drawn uniformly from the state space.
    fn random_state(&self, _rng: &mut SimRng) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!(
            "random states for {}",
            self.spec().name
        )))
    }

    fn to_tabular(&self) -> Result<TabularCmdp> {
        Err(Error::Unsupported(format!(
            "tabular export of {}",
            self.spec().name
        )))
    }

    fn clone_box(&self) -> Box<dyn Environment>;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub trait Policy: Sync {
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action {
        (**self).act(obs, rng)
    }
}

#[derive(Clone, Debug)]
pub struct UniformPolicy(pub ActionSpace);

impl Policy for UniformPolicy {
    fn act(&self, _obs: &[f64], rng: &mut SimRng) -> Action {
        self.0.sample_uniform(rng)
    }
}

/// Wraps a closure as a policy.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[f64], &mut SimRng) -> Action + Sync,
{
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action {
        (self.0)(obs, rng)
    }
}

const POLICY_STREAM: u64 = 0x706f_6c69;

/// Runs one full episode. The environment is reset with `seed`; the policy
/// draws from an independent stream derived from the same seed.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    env: &mut dyn Environment,
    seed: u64,
) -> Result<Trajectory> {
    let obs = env.reset(seed);
    let mut prng = rng::stream(seed, POLICY_STREAM);
    continue_episode(policy, env, obs, &mut prng, seed)
}

/// Continues an episode from `obs` until the environment reports `done`.
pub fn continue_episode<P: Policy + ?Sized>(
    policy: &P,
    env: &mut dyn Environment,
    mut obs: Vec<f64>,
    prng: &mut SimRng,
    seed: u64,
) -> Result<Trajectory> {
    let mut transitions = Vec::with_capacity(env.spec().episode_length);
    loop {
        let a = policy.act(&obs, prng);
        let out = env.step(&a)?;
        let done = out.done;
        transitions.push(Transition {
            s: obs,
            a,
            r: out.reward,
            c: out.cost,
            s2: out.obs.clone(),
            done,
        });
        obs = out.obs;
        if done {
            break;
        }
    }
    Ok(Trajectory { transitions, seed })
}

/// `sum_t gamma^t x_t` over the chosen channel.
pub fn discounted_return(traj: &Trajectory, gamma: f64, channel: Channel) -> f64 {
    let mut acc = 0.0;
    let mut weight = 1.0;
    for t in &traj.transitions {
        acc += weight * channel.pick(t);
        weight *= gamma;
    }
    acc
}

/// CSV export with header `step,s0..,a0..,r,c,done`.
pub fn write_trajectory_csv<W: Write>(
    traj: &Trajectory,
    space: &ActionSpace,
    mut w: W,
) -> Result<()> {
    let obs_dim = traj.transitions.first().map_or(0, |t| t.s.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..obs_dim).map(|i| format!("s{i}")));
    header.extend((0..space.flat_dim()).map(|i| format!("a{i}")));
    header.extend(["r", "c", "done"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for (step, t) in traj.transitions.iter().enumerate() {
        let mut row = vec![step.to_string()];
        row.extend(t.s.iter().map(|v| v.to_string()));
        row.extend(t.a.values().iter().map(|v| v.to_string()));
        row.push(t.r.to_string());
        row.push(t.c.to_string());
        row.push(u8::from(t.done).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
