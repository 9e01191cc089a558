//! Offline datasets and CPQ pretraining of the policy, reward critic and
//! cost critic.

mod dataset;
mod ood;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, zero_cost_fraction, Behavior, DatasetMeta, OfflineDataset,
};
pub use ood::{OodDraw, OodSampler, DEFAULT_K, DEFAULT_QUANTILE, DEFAULT_REFERENCE_CAP};

use serde::{Deserialize, Serialize};

use crate::approx::{
    critic_value_and_action_grad, loss_grad, Adam, Agent, Loss, Mlp, StochasticPolicy, TargetNet,
};
use crate::cmdp::{critic_input, ActionSpace, EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpqConfig {
    /// Weight of the OOD cost inflation term.
    pub psi: f64,
    /// Indicator threshold on Qc; `None` means `c_th * (1 - gamma)`.
    pub l: Option<f64>,
    pub updates: usize,
    pub batch: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub lr_qc: f64,
    pub tau: f64,
    pub hidden: Vec<usize>,
    /// OOD actions drawn per batch state.
    pub n_ood: usize,
    /// Next-action samples for continuous expectations.
    pub m: usize,
    /// Entropy weight in the actor objective.
    pub alpha: f64,
    pub init_log_std: f64,
    /// Neighbor count, quantile and reference cap of the OOD sampler.
    pub ood_k: usize,
    pub ood_quantile: f64,
    pub ood_reference_cap: usize,
}

impl Default for CpqConfig {
    fn default() -> Self {
        Self {
            psi: 1.0,
            l: None,
            updates: 1000,
            batch: 256,
            lr_policy: 5e-5,
            lr_q: 3e-5,
            lr_qc: 8e-5,
            tau: 5e-2,
            hidden: vec![256, 256],
            n_ood: 1,
            m: 1,
            alpha: 0.0,
            init_log_std: -0.5,
            ood_k: DEFAULT_K,
            ood_quantile: DEFAULT_QUANTILE,
            ood_reference_cap: DEFAULT_REFERENCE_CAP,
        }
    }
}

impl CpqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("cpq: {what}")));
        if !(self.psi >= 0.0) {
            return bad("psi must be >= 0");
        }
        if matches!(self.l, Some(l) if !(l >= 0.0)) {
            return bad("l must be >= 0");
        }
        if self.batch == 0 || self.m == 0 || self.hidden.is_empty() {
            return bad("batch, m and hidden must be non-empty");
        }
        if !(self.lr_policy > 0.0 && self.lr_q > 0.0 && self.lr_qc > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(self.alpha >= 0.0) {
            return bad("tau must be in [0, 1] and alpha >= 0");
        }
        Ok(())
    }

    pub fn cost_limit(&self, spec: &EnvSpec) -> f64 {
        self.l.unwrap_or(spec.cost_threshold * (1.0 - spec.gamma))
    }
}

pub(crate) fn inputs(space: &ActionSpace, batch: &[&Transition]) -> Vec<Vec<f64>> {
    batch.iter().map(|t| critic_input(space, &t.s, &t.a)).collect()
}

fn check_batch(batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    Ok(())
}

/// Cost-critic loss: regression toward `c + gamma (1 - done) E[Qc_target(s', a')]`
/// minus `psi` times the mean prediction on OOD pairs.
pub fn cpq_qc_loss(
    qc_target: &TargetNet,
    policy: &StochasticPolicy,
    space: &ActionSpace,
    batch: &[&Transition],
    ood_inputs: Vec<Vec<f64>>,
    psi: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Loss> {
    check_batch(batch)?;
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let mut y = t.c;
        if !t.done && gamma > 0.0 {
            let next = policy.expectation(&t.s2, m, rng, |a, _| qc_target.net.value(&critic_input(space, &t.s2, a)))?;
            y += gamma * next;
        }
        targets.push(y);
    }
    let mut loss = Loss::new().mse(inputs(space, batch), targets);
    if psi != 0.0 {
        if ood_inputs.is_empty() {
            return Err(Error::Empty("OOD inputs"));
        }
        loss = loss.mean_output(ood_inputs, -psi);
    }
    Ok(loss)
}

/// Per-sample reward-critic targets `r + gamma (1 - done) E[1{Qc(s',a') < l} Q(s',a')]`
/// bootstrapping from the current reward critic.
pub fn cpq_q_targets(
    q: &Mlp,
    qc: &Mlp,
    policy: &StochasticPolicy,
    space: &ActionSpace,
    batch: &[&Transition],
    l: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    check_batch(batch)?;
    batch
        .iter()
        .map(|t| {
            let mut y = t.r;
            if !t.done && gamma > 0.0 {
                let next = policy.expectation(&t.s2, m, rng, |a, _| {
                    let x = critic_input(space, &t.s2, a);
                    Ok(if qc.value(&x)? < l { q.value(&x)? } else { 0.0 })
                })?;
                y += gamma * next;
            }
            Ok(y)
        })
        .collect()
}

pub fn cpq_q_loss(
    q: &Mlp,
    qc: &Mlp,
    policy: &StochasticPolicy,
    space: &ActionSpace,
    batch: &[&Transition],
    l: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Loss> {
    let targets = cpq_q_targets(q, qc, policy, space, batch, l, gamma, m, rng)?;
    Ok(Loss::new().mse(inputs(space, batch), targets))
}

/// Actor objective to minimize: `mean_s E_a [alpha log pi - 1{Qc(s,a) < l} Q(s,a)]`.
/// The indicator is a stop-gradient mask.
pub fn cpq_policy_objective(
    policy: &StochasticPolicy,
    q: &Mlp,
    qc: &Mlp,
    space: &ActionSpace,
    states: &[Vec<f64>],
    noise: &[Vec<f64>],
    l: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let f = |s: &[f64], a: &crate::cmdp::Action, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let x = critic_input(space, s, a);
        if qc.value(&x)? >= l {
            return Ok((0.0, want_grad.then(|| vec![0.0; space.flat_dim()])));
        }
        if want_grad {
            let (v, g) = critic_value_and_action_grad(q, space, s, a)?;
            Ok((-v, Some(g.into_iter().map(|x| -x).collect())))
        } else {
            Ok((-q.value(&x)?, None))
        }
    };
    policy.objective_grad(states, noise, alpha, &f)
}

/// Networks plus optimizer state for CPQ.
#[derive(Clone, Debug)]
pub struct CpqLearner {
    pub agent: Agent,
    pub opt_policy: Adam,
    pub opt_q: Adam,
    pub opt_qc: Adam,
    pub cfg: CpqConfig,
    pub spec: EnvSpec,
    pub steps: usize,
    pub ood_warnings: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CpqStepStats {
    pub q_loss: f64,
    pub qc_loss: f64,
    pub policy_objective: f64,
}

fn finite(v: f64, what: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

fn tag_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

impl CpqLearner {
    pub fn new(agent: Agent, spec: &EnvSpec, cfg: CpqConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt_policy: Adam::new(agent.policy.n_params(), cfg.lr_policy),
            opt_q: Adam::new(agent.q.params().len(), cfg.lr_q),
            opt_qc: Adam::new(agent.qc.params().len(), cfg.lr_qc),
            agent,
            cfg,
            spec: spec.clone(),
            steps: 0,
            ood_warnings: 0,
        })
    }

    pub fn update_qc(&mut self, batch: &[&Transition], sampler: &OodSampler, rng: &mut SimRng) -> Result<f64> {
        let space = &self.spec.action_space;
        let mut ood = Vec::with_capacity(batch.len() * self.cfg.n_ood);
        if self.cfg.psi != 0.0 {
            for t in batch {
                let draw = sampler.ood_sample(&t.s, self.cfg.n_ood, rng);
                self.ood_warnings += usize::from(draw.warning);
                ood.extend(draw.actions.iter().map(|a| critic_input(space, &t.s, a)));
            }
        }
        let loss = cpq_qc_loss(
            &self.agent.qc_target,
            &self.agent.policy,
            space,
            batch,
            ood,
            self.cfg.psi,
            self.spec.gamma,
            self.cfg.m,
            rng,
        )?;
        let (v, g) = loss_grad(&self.agent.qc, &loss)?;
        finite(v, "cpq cost-critic loss", self.steps)?;
        self.opt_qc.step(self.agent.qc.params_mut(), &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.qc_target.soft_update(self.agent.qc.params(), self.cfg.tau)?;
        Ok(v)
    }

    pub fn update_q(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<f64> {
        let l = self.cfg.cost_limit(&self.spec);
        let loss = cpq_q_loss(
            &self.agent.q,
            &self.agent.qc,
            &self.agent.policy,
            &self.spec.action_space,
            batch,
            l,
            self.spec.gamma,
            self.cfg.m,
            rng,
        )?;
        let (v, g) = loss_grad(&self.agent.q, &loss)?;
        finite(v, "cpq reward-critic loss", self.steps)?;
        self.opt_q.step(self.agent.q.params_mut(), &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.q_target.soft_update(self.agent.q.params(), self.cfg.tau)?;
        Ok(v)
    }

    pub fn update_policy(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<f64> {
        check_batch(batch)?;
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
        let noise: Vec<Vec<f64>> = states.iter().map(|_| self.agent.policy.draw_noise(rng)).collect();
        let (j, g) = cpq_policy_objective(
            &self.agent.policy,
            &self.agent.q,
            &self.agent.qc,
            &self.spec.action_space,
            &states,
            &noise,
            self.cfg.cost_limit(&self.spec),
            self.cfg.alpha,
        )?;
        finite(j, "cpq policy objective", self.steps)?;
        let mut p = self.agent.policy.flat_params();
        self.opt_policy.step(&mut p, &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.policy.set_flat_params(&p)?;
        self.agent.policy.clamp_log_std();
        Ok(j)
    }

    /// One round: cost critic, reward critic, then policy on a shared batch.
    pub fn step(&mut self, ds: &OfflineDataset, sampler: &OodSampler, rng: &mut SimRng) -> Result<CpqStepStats> {
        let batch = ds.sample(self.cfg.batch, rng)?;
        let qc_loss = self.update_qc(&batch, sampler, rng)?;
        let q_loss = self.update_q(&batch, rng)?;
        let policy_objective = self.update_policy(&batch, rng)?;
        self.steps += 1;
        Ok(CpqStepStats {
            q_loss,
            qc_loss,
            policy_objective,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub agent: Agent,
    pub last: CpqStepStats,
    pub ood_warnings: usize,
    pub ood_threshold: f64,
}

/// Fresh networks trained with `cfg.updates` CPQ rounds.
pub fn pretrain(ds: &OfflineDataset, spec: &EnvSpec, cfg: &CpqConfig, seed: u64) -> Result<PretrainOutput> {
    if ds.is_empty() {
        return Err(Error::Empty("offline dataset"));
    }
    let mut init_rng = rng::stream(seed, 1);
    let agent = Agent::new(spec, &cfg.hidden, cfg.init_log_std, &mut init_rng)?;
    pretrain_from(agent, ds, spec, cfg, seed)
}

pub fn pretrain_from(agent: Agent, ds: &OfflineDataset, spec: &EnvSpec, cfg: &CpqConfig, seed: u64) -> Result<PretrainOutput> {
    let sampler = OodSampler::fit(
        ds,
        &spec.action_space,
        cfg.ood_k,
        cfg.ood_quantile,
        cfg.ood_reference_cap,
        rng::derive_seed(seed, 2),
    )?;
    let mut learner = CpqLearner::new(agent, spec, cfg.clone())?;
    let mut r = rng::stream(seed, 3);
    let mut last = CpqStepStats::default();
    for _ in 0..cfg.updates {
        last = learner.step(ds, &sampler, &mut r)?;
    }
    Ok(PretrainOutput {
        agent: learner.agent,
        last,
        ood_warnings: learner.ood_warnings,
        ood_threshold: sampler.threshold,
    })
}
