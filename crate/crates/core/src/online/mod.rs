//! Online SAC-lag finetuning with a pluggable Lagrange multiplier controller.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::checkpoint::RngState;
use crate::approx::{critic_value_and_action_grad, loss_grad, Adam, Agent, Greedy, Loss, Mlp, StochasticPolicy, TargetNet};
use crate::cmdp::{critic_input, rollout, ActionSpace, Channel, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};
use crate::lagrange::{Controller, LagrangeState};
use crate::rng::{self, SimRng};
use crate::vpa::entropy_target;

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    /// Slot the next insertion overwrites once full.
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            data: Vec::new(),
            head: 0,
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Total insertions including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.data.len() < self.capacity { 0 } else { self.head };
        self.data[split..].iter().chain(self.data[..split].iter())
    }

    /// `n` draws with replacement, uniform over current contents.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Vec<&Transition>> {
        if self.data.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n).map(|_| &self.data[rng.random_range(0..self.data.len())]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    WarmStart,
    FromScratch,
}

impl InitMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "warm_start" => Ok(InitMode::WarmStart),
            "from_scratch" => Ok(InitMode::FromScratch),
            other => Err(Error::InvalidArgument(format!("unknown init mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitMode::WarmStart => "warm_start",
            InitMode::FromScratch => "from_scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacLagConfig {
    pub alpha: f64,
    pub batch: usize,
    pub tau: f64,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub lr_qc: f64,
    pub episodes_per_update: usize,
    pub total_steps: usize,
    pub controller: Controller,
    pub init: InitMode,
    pub buffer_capacity: usize,
    /// Network sizes for `from_scratch` initialization.
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub m: usize,
    pub eval_episodes: usize,
    /// Evaluate every this many steps; the final step is always evaluated.
    pub eval_every: usize,
    /// Write a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for SacLagConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-3,
            batch: 256,
            tau: 5e-2,
            lr_policy: 5e-5,
            lr_q: 3e-5,
            lr_qc: 8e-5,
            episodes_per_update: 3,
            total_steps: 1000,
            controller: Controller::from_name("apid").expect("known controller"),
            init: InitMode::WarmStart,
            buffer_capacity: 1_000_000,
            hidden: vec![256, 256],
            init_log_std: -0.5,
            m: 1,
            eval_episodes: 5,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl SacLagConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("sac-lag: {what}")));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.batch == 0 || self.episodes_per_update == 0 || self.buffer_capacity == 0 || self.m == 0 {
            return bad("batch, episodes_per_update, buffer_capacity and m must be positive");
        }
        if self.eval_episodes == 0 || self.eval_every == 0 || self.hidden.is_empty() {
            return bad("eval_episodes, eval_every and hidden must be positive");
        }
        if !(self.lr_policy > 0.0 && self.lr_q > 0.0 && self.lr_qc > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must be in [0, 1]");
        }
        Ok(())
    }
}

/// Reward-critic loss toward `r + gamma (1 - done) E[Q_target(s', a') - alpha log pi(a'|s')]`.
pub fn sac_q_loss(
    batch: &[&Transition],
    policy: &StochasticPolicy,
    q_target: &TargetNet,
    space: &ActionSpace,
    alpha: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Loss> {
    channel_loss(batch, Channel::Reward, policy, q_target, space, alpha, gamma, m, rng)
}

/// Cost-critic loss toward `c + gamma (1 - done) E[Qc_target(s', a')]`; no entropy term.
pub fn sac_qc_loss(
    batch: &[&Transition],
    policy: &StochasticPolicy,
    qc_target: &TargetNet,
    space: &ActionSpace,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Loss> {
    channel_loss(batch, Channel::Cost, policy, qc_target, space, 0.0, gamma, m, rng)
}

fn channel_loss(
    batch: &[&Transition],
    channel: Channel,
    policy: &StochasticPolicy,
    target: &TargetNet,
    space: &ActionSpace,
    alpha: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<Loss> {
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    let targets = batch
        .iter()
        .map(|t| entropy_target(t, channel, policy, target, space, alpha, gamma, m, rng))
        .collect::<Result<Vec<_>>>()?;
    let inputs = batch.iter().map(|t| critic_input(space, &t.s, &t.a)).collect();
    Ok(Loss::new().mse(inputs, targets))
}

/// Actor objective `mean_s E_a [alpha log pi - Q(s,a) + lambda Qc(s,a)]` and its gradient.
pub fn sac_policy_objective(
    policy: &StochasticPolicy,
    q: &Mlp,
    qc: &Mlp,
    space: &ActionSpace,
    states: &[Vec<f64>],
    noise: &[Vec<f64>],
    lambda: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let f = |s: &[f64], a: &crate::cmdp::Action, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        if want_grad {
            let (vq, gq) = critic_value_and_action_grad(q, space, s, a)?;
            if lambda == 0.0 {
                return Ok((-vq, Some(gq.into_iter().map(|x| -x).collect())));
            }
            let (vc, gc) = critic_value_and_action_grad(qc, space, s, a)?;
            let g = gq.iter().zip(&gc).map(|(a, b)| -a + lambda * b).collect();
            Ok((-vq + lambda * vc, Some(g)))
        } else {
            let x = critic_input(space, s, a);
            let mut v = -q.value(&x)?;
            if lambda != 0.0 {
                v += lambda * qc.value(&x)?;
            }
            Ok((v, None))
        }
    };
    policy.objective_grad(states, noise, alpha, &f)
}

fn nonfinite(what: &str, step: usize) -> Error {
    Error::NonFinite {
        what: what.to_string(),
        step,
    }
}

fn tag_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    }
}

/// Networks and optimizer state for SAC-lag.
#[derive(Clone, Debug)]
pub struct SacLagLearner {
    pub agent: Agent,
    pub opt_policy: Adam,
    pub opt_q: Adam,
    pub opt_qc: Adam,
    pub cfg: SacLagConfig,
    pub spec: EnvSpec,
    pub steps: usize,
}

impl SacLagLearner {
    pub fn new(agent: Agent, spec: &EnvSpec, cfg: SacLagConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt_policy: Adam::new(agent.policy.n_params(), cfg.lr_policy),
            opt_q: Adam::new(agent.q.params().len(), cfg.lr_q),
            opt_qc: Adam::new(agent.qc.params().len(), cfg.lr_qc),
            agent,
            cfg,
            spec: spec.clone(),
            steps: 0,
        })
    }

    pub fn update_q(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<f64> {
        let loss = sac_q_loss(
            batch,
            &self.agent.policy,
            &self.agent.q_target,
            &self.spec.action_space,
            self.cfg.alpha,
            self.spec.gamma,
            self.cfg.m,
            rng,
        )?;
        let (v, g) = loss_grad(&self.agent.q, &loss)?;
        if !v.is_finite() {
            return Err(nonfinite("sac reward-critic loss", self.steps));
        }
        self.opt_q.step(self.agent.q.params_mut(), &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.q_target.soft_update(self.agent.q.params(), self.cfg.tau)?;
        Ok(v)
    }

    pub fn update_qc(&mut self, batch: &[&Transition], rng: &mut SimRng) -> Result<f64> {
        let loss = sac_qc_loss(
            batch,
            &self.agent.policy,
            &self.agent.qc_target,
            &self.spec.action_space,
            self.spec.gamma,
            self.cfg.m,
            rng,
        )?;
        let (v, g) = loss_grad(&self.agent.qc, &loss)?;
        if !v.is_finite() {
            return Err(nonfinite("sac cost-critic loss", self.steps));
        }
        self.opt_qc.step(self.agent.qc.params_mut(), &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.qc_target.soft_update(self.agent.qc.params(), self.cfg.tau)?;
        Ok(v)
    }

    pub fn update_policy(&mut self, batch: &[&Transition], lambda: f64, rng: &mut SimRng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("minibatch"));
        }
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
        let noise: Vec<Vec<f64>> = states.iter().map(|_| self.agent.policy.draw_noise(rng)).collect();
        let (j, g) = sac_policy_objective(
            &self.agent.policy,
            &self.agent.q,
            &self.agent.qc,
            &self.spec.action_space,
            &states,
            &noise,
            lambda,
            self.cfg.alpha,
        )?;
        if !j.is_finite() {
            return Err(nonfinite("sac policy objective", self.steps));
        }
        let mut p = self.agent.policy.flat_params();
        self.opt_policy.step(&mut p, &g).map_err(|e| tag_step(e, self.steps))?;
        self.agent.policy.set_flat_params(&p)?;
        self.agent.policy.clamp_log_std();
        Ok(j)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean_return: f64,
    pub mean_cost: f64,
    /// Undiscounted `(return, cost)` per episode.
    pub episodes: Vec<(f64, f64)>,
}

/// Undiscounted return and cost of the policy's deterministic mode.
pub fn evaluate_policy(policy: &StochasticPolicy, env: &mut dyn Environment, n_episodes: usize, seed: u64) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    let greedy = Greedy(policy);
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let traj = rollout(&greedy, env, rng::derive_seed(seed, i as u64))?;
        episodes.push((traj.total(Channel::Reward), traj.total(Channel::Cost)));
    }
    let n = n_episodes as f64;
    Ok(EvalSummary {
        mean_return: episodes.iter().map(|e| e.0).sum::<f64>() / n,
        mean_cost: episodes.iter().map(|e| e.1).sum::<f64>() / n,
        episodes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub eval_return: f64,
    pub eval_cost: f64,
    pub lambda: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub err: f64,
    pub cum_env_cost: f64,
    pub max_return_so_far: f64,
}

pub const METRICS_HEADER: &str = "step,eval_return,eval_cost,lambda,kp,ki,kd,err,cum_env_cost,max_return_so_far";

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.eval_return, r.eval_cost, r.lambda, r.kp, r.ki, r.kd, r.err, r.cum_env_cost, r.max_return_so_far
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected metrics header, found {:?}", other.unwrap_or("")),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 2, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| bad(format!("field {k}: {e}")));
        rows.push(MetricRow {
            step: f[0].trim().parse().map_err(|e| bad(format!("step: {e}")))?,
            eval_return: num(1)?,
            eval_cost: num(2)?,
            lambda: num(3)?,
            kp: num(4)?,
            ki: num(5)?,
            kd: num(6)?,
            err: num(7)?,
            cum_env_cost: num(8)?,
            max_return_so_far: num(9)?,
        });
    }
    Ok(rows)
}

const INIT_STREAM: u64 = 0x696e_6974;
const TRAIN_STREAM: u64 = 0x7472_6169;
const EPISODE_STREAM: u64 = 0x6570_6973;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Initial agent for the configured mode: the given checkpoint for
/// `warm_start`, fresh networks for `from_scratch`.
pub fn initial_agent(spec: &EnvSpec, cfg: &SacLagConfig, pretrained: Option<Agent>, seed: u64) -> Result<Agent> {
    match (cfg.init, pretrained) {
        (InitMode::WarmStart, Some(a)) => Ok(a),
        (InitMode::WarmStart, None) => Err(Error::InvalidArgument("warm start needs a pretrained agent".into())),
        (InitMode::FromScratch, _) => Agent::new(spec, &cfg.hidden, cfg.init_log_std, &mut rng::stream(seed, INIT_STREAM)),
    }
}

/// Resumable online training state, excluding networks.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    step: usize,
    seed: u64,
    lambda: LagrangeState,
    controller: Controller,
    opt_policy: Adam,
    opt_q: Adam,
    opt_qc: Adam,
    buffer: ReplayBuffer,
    episodes: u64,
    cum_env_cost: f64,
    max_return: f64,
    rng: RngState,
    metrics: Vec<MetricRow>,
    cfg: SacLagConfig,
}

/// The online phase: rollouts, one update per network, controller tick.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub learner: SacLagLearner,
    pub buffer: ReplayBuffer,
    pub lambda: LagrangeState,
    pub controller: Controller,
    pub metrics: Vec<MetricRow>,
    pub cum_env_cost: f64,
    pub max_return: f64,
    seed: u64,
    episodes: u64,
    rng: SimRng,
}

const PROGRESS_FILE: &str = "progress.json";

impl Finetuner {
    pub fn new(agent: Agent, spec: &EnvSpec, cfg: SacLagConfig, seed: u64) -> Result<Self> {
        let controller = cfg.controller.clone();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
            learner: SacLagLearner::new(agent, spec, cfg)?,
            lambda: LagrangeState::default(),
            controller,
            metrics: Vec::new(),
            cum_env_cost: 0.0,
            max_return: f64::NEG_INFINITY,
            seed,
            episodes: 0,
            rng: rng::stream(seed, TRAIN_STREAM),
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.learner.agent
    }

    pub fn steps_done(&self) -> usize {
        self.learner.steps
    }

    pub fn is_finished(&self) -> bool {
        self.learner.steps >= self.learner.cfg.total_steps
    }

    /// One round. Returns the metric row when this step was evaluated.
    pub fn step(&mut self, env: &mut dyn Environment) -> Result<Option<MetricRow>> {
        let cfg = self.learner.cfg.clone();
        let step = self.learner.steps;
        let mut costs = Vec::with_capacity(cfg.episodes_per_update);
        for _ in 0..cfg.episodes_per_update {
            let ep_seed = rng::derive_seed(rng::derive_seed(self.seed, EPISODE_STREAM), self.episodes);
            self.episodes += 1;
            let traj = rollout(&self.learner.agent.policy, env, ep_seed)?;
            let c = traj.total(Channel::Cost);
            costs.push(c);
            self.cum_env_cost += c;
            self.buffer.extend(traj.transitions);
        }

        let batch: Vec<Transition> = self.buffer.sample(cfg.batch, &mut self.rng)?.into_iter().cloned().collect();
        let batch: Vec<&Transition> = batch.iter().collect();
        let rng = &mut self.rng;
        self.learner.update_q(&batch, rng)?;
        self.learner.update_qc(&batch, rng)?;
        self.learner.update_policy(&batch, self.lambda.lambda, rng)?;

        let (next, rec) = self.controller.tick(self.lambda, &costs, env.spec().cost_threshold, step)?;
        if !next.lambda.is_finite() {
            return Err(nonfinite("lagrange multiplier", step));
        }
        self.lambda = next;
        self.learner.steps += 1;

        let done = self.learner.steps;
        if done % cfg.eval_every != 0 && done != cfg.total_steps {
            return Ok(None);
        }
        let eval = evaluate_policy(
            &self.learner.agent.policy,
            env,
            cfg.eval_episodes,
            rng::derive_seed(self.seed, EVAL_STREAM),
        )?;
        self.max_return = self.max_return.max(eval.mean_return);
        let row = MetricRow {
            step: done,
            eval_return: eval.mean_return,
            eval_cost: eval.mean_cost,
            lambda: rec.lambda,
            kp: rec.kp,
            ki: rec.ki,
            kd: rec.kd,
            err: rec.err,
            cum_env_cost: self.cum_env_cost,
            max_return_so_far: self.max_return,
        };
        self.metrics.push(row);
        Ok(Some(row))
    }

    /// Runs until `total_steps`, saving to `checkpoint_dir` every
    /// `checkpoint_every` steps when a directory is given.
    pub fn run(&mut self, env: &mut dyn Environment, checkpoint_dir: Option<&Path>) -> Result<()> {
        while !self.is_finished() {
            self.step(env)?;
            let every = self.learner.cfg.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && (self.learner.steps % every == 0 || self.is_finished()) {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.learner.agent.save_dir(dir)?;
        let progress = Progress {
            step: self.learner.steps,
            seed: self.seed,
            lambda: self.lambda,
            controller: self.controller.clone(),
            opt_policy: self.learner.opt_policy.clone(),
            opt_q: self.learner.opt_q.clone(),
            opt_qc: self.learner.opt_qc.clone(),
            buffer: self.buffer.clone(),
            episodes: self.episodes,
            cum_env_cost: self.cum_env_cost,
            max_return: self.max_return,
            rng: RngState::capture(&self.rng),
            metrics: self.metrics.clone(),
            cfg: self.learner.cfg.clone(),
        };
        let tmp = dir.join(format!("{PROGRESS_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&progress)?)?;
        fs::rename(tmp, dir.join(PROGRESS_FILE))?;
        Ok(())
    }

    pub fn can_resume(dir: &Path) -> bool {
        dir.join(PROGRESS_FILE).is_file() && Agent::exists_in(dir)
    }

    /// Restores a saved run. `total_steps` may be raised to extend it.
    pub fn load(dir: &Path, spec: &EnvSpec, total_steps: usize) -> Result<Self> {
        let agent = Agent::load_dir(dir)?;
        let p: Progress = serde_json::from_slice(&fs::read(dir.join(PROGRESS_FILE))?)?;
        let mut cfg = p.cfg;
        cfg.total_steps = total_steps;
        let mut learner = SacLagLearner::new(agent, spec, cfg)?;
        learner.opt_policy = p.opt_policy;
        learner.opt_q = p.opt_q;
        learner.opt_qc = p.opt_qc;
        learner.steps = p.step;
        Ok(Self {
            learner,
            buffer: p.buffer,
            lambda: p.lambda,
            controller: p.controller,
            metrics: p.metrics,
            cum_env_cost: p.cum_env_cost,
            max_return: p.max_return,
            seed: p.seed,
            episodes: p.episodes,
            rng: p.rng.restore()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub agent: Agent,
    pub metrics: Vec<MetricRow>,
    pub lambda: f64,
    pub controller: Controller,
    pub cum_env_cost: f64,
}

/// Online finetuning from `agent` with lambda starting at 0.
pub fn finetune_loop(env: &mut dyn Environment, agent: Agent, cfg: &SacLagConfig, seed: u64) -> Result<FinetuneOutput> {
    let spec = env.spec().clone();
    let mut ft = Finetuner::new(agent, &spec, cfg.clone(), seed)?;
    ft.run(env, None)?;
    Ok(FinetuneOutput {
        agent: ft.learner.agent,
        metrics: ft.metrics,
        lambda: ft.lambda.lambda,
        controller: ft.controller,
        cum_env_cost: ft.cum_env_cost,
    })
}
