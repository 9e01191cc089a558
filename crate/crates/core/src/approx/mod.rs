//! Differentiable function approximation: MLPs with hand-written reverse
//! mode, minibatch losses, Adam, target networks and stochastic policy heads.

mod adam;
mod agent;
pub mod checkpoint;
pub mod gradcheck;
mod loss;
mod net;
mod policy;
mod target;

pub use adam::Adam;
pub use agent::Agent;
pub use loss::{loss_grad, loss_value, Loss, LossTerm};
pub use net::{Activation, Mlp, Trace};
pub use policy::{ActionObjective, Greedy, PolicyHead, StochasticPolicy, LOG_STD_MAX, LOG_STD_MIN};
pub use target::TargetNet;

use crate::cmdp::{Action, ActionSpace, EnvSpec};
use crate::error::Result;
use crate::rng::SimRng;

/// Scalar critic over `(observation, encoded action)` inputs.
pub fn new_critic(spec: &EnvSpec, hidden: &[usize], rng: &mut SimRng) -> Result<Mlp> {
    let mut sizes = vec![spec.critic_input_dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::init(&sizes, Activation::Tanh, 1.0, rng)
}

/// Critic value and its gradient with respect to a continuous action.
pub fn critic_value_and_action_grad(
    critic: &Mlp,
    space: &ActionSpace,
    s: &[f64],
    a: &Action,
) -> Result<(f64, Vec<f64>)> {
    let x = crate::cmdp::critic_input(space, s, a);
    let trace = critic.forward_trace(&x)?;
    let gx = critic.input_grad(&trace, &[1.0]);
    Ok((trace.output()[0], gx[s.len()..].to_vec()))
}
