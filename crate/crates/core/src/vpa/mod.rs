//! Value pre-alignment: entropy-augmented fitted Q-evaluation of a frozen
//! policy on the offline dataset, plus rank-correlation diagnostics against
//! Monte-Carlo returns.

use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{loss_grad, Adam, Agent, Loss, Mlp, StochasticPolicy, TargetNet};
use crate::cmdp::{continue_episode, critic_input, discounted_return, Action, ActionSpace, Channel, EnvSpec, Environment, Policy, Transition};
use crate::error::{Error, Result};
use crate::offline::OfflineDataset;
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpaConfig {
    pub alpha: f64,
    pub alpha_c: f64,
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    /// Next-action samples for continuous expectations.
    pub m: usize,
    pub lr_q: f64,
    pub lr_qc: f64,
}

impl Default for VpaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            alpha_c: 5e-4,
            steps: 2000,
            batch: 256,
            tau: 5e-2,
            m: 1,
            lr_q: 3e-5,
            lr_qc: 8e-5,
        }
    }
}

impl VpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha_c >= 0.0) {
            return Err(Error::InvalidArgument("vpa entropy coefficients must be >= 0".into()));
        }
        if self.batch == 0 || self.m == 0 || !(self.lr_q > 0.0 && self.lr_qc > 0.0) {
            return Err(Error::InvalidArgument("vpa batch, m and learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument("vpa tau must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `x + gamma (1 - done) E_{a' ~ pi}[target(s', a') - alpha log pi(a'|s')]`
/// where `x` is the reward or cost of the chosen channel.
pub fn entropy_target(
    t: &Transition,
    channel: Channel,
    policy: &StochasticPolicy,
    target: &TargetNet,
    space: &ActionSpace,
    alpha: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let x = channel.pick(t);
    if t.done || gamma == 0.0 {
        return Ok(x);
    }
    let next = policy.expectation(&t.s2, m, rng, |a, logp| {
        Ok(target.net.value(&critic_input(space, &t.s2, a))? - alpha * logp)
    })?;
    Ok(x + gamma * next)
}

pub fn vpa_q_target(
    t: &Transition,
    policy: &StochasticPolicy,
    q_target: &TargetNet,
    space: &ActionSpace,
    alpha: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    entropy_target(t, Channel::Reward, policy, q_target, space, alpha, gamma, m, rng)
}

pub fn vpa_qc_target(
    t: &Transition,
    policy: &StochasticPolicy,
    qc_target: &TargetNet,
    space: &ActionSpace,
    alpha_c: f64,
    gamma: f64,
    m: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    entropy_target(t, Channel::Cost, policy, qc_target, space, alpha_c, gamma, m, rng)
}

/// Regression loss toward entropy-augmented targets on one channel.
pub fn vpa_loss(
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

fn step_critic(net: &mut Mlp, opt: &mut Adam, loss: &Loss, what: &str, step: usize) -> Result<f64> {
    let (v, g) = loss_grad(net, loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
            step,
        });
    }
    opt.step(net.params_mut(), &g).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        other => other,
    })?;
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct VpaOutput {
    pub agent: Agent,
    pub last_q_loss: f64,
    pub last_qc_loss: f64,
}

/// Aligns the critics of `agent` to its frozen policy. The policy is never
/// written.
pub fn vpa_run(ds: &OfflineDataset, agent: Agent, spec: &EnvSpec, cfg: &VpaConfig, seed: u64) -> Result<VpaOutput> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("offline dataset"));
    }
    let Agent {
        policy,
        mut q,
        mut qc,
        mut q_target,
        mut qc_target,
    } = agent;
    let mut opt_q = Adam::new(q.params().len(), cfg.lr_q);
    let mut opt_qc = Adam::new(qc.params().len(), cfg.lr_qc);
    let mut r = rng::stream(seed, 0x767061);
    let space = &spec.action_space;
    let (mut lq, mut lqc) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let batch = ds.sample(cfg.batch, &mut r)?;
        let loss_q = vpa_loss(&batch, Channel::Reward, &policy, &q_target, space, cfg.alpha, spec.gamma, cfg.m, &mut r)?;
        let loss_qc = vpa_loss(&batch, Channel::Cost, &policy, &qc_target, space, cfg.alpha_c, spec.gamma, cfg.m, &mut r)?;
        lq = step_critic(&mut q, &mut opt_q, &loss_q, "vpa reward loss", step)?;
        lqc = step_critic(&mut qc, &mut opt_qc, &loss_qc, "vpa cost loss", step)?;
        q_target.soft_update(q.params(), cfg.tau)?;
        qc_target.soft_update(qc.params(), cfg.tau)?;
    }
    Ok(VpaOutput {
        agent: Agent {
            policy,
            q,
            qc,
            q_target,
            qc_target,
        },
        last_q_loss: lq,
        last_qc_loss: lqc,
    })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares their mean.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation with average ranks for ties (Pearson
/// correlation of the rank vectors).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("spearman inputs", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("spearman input contains NaN".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant input to spearman".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean discounted reward and cost over `n_rollouts` episodes that start in
/// the state `s`, take `a` first, then follow `policy`.
pub fn mc_q_estimate<P: Policy + ?Sized>(
    policy: &P,
    env: &dyn Environment,
    s: &[f64],
    a: &Action,
    gamma: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_rollouts == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    let jobs: Vec<(u64, Box<dyn Environment>)> = (0..n_rollouts as u64).map(|i| (i, env.clone_box())).collect();
    let returns = jobs
        .into_par_iter()
        .map(|(i, mut e)| {
            let ep_seed = rng::derive_seed(seed, i);
            e.inject(s, ep_seed)?;
            let out = e.step(a)?;
            let first = Transition {
                s: s.to_vec(),
                a: a.clone(),
                r: out.reward,
                c: out.cost,
                s2: out.obs.clone(),
                done: out.done,
            };
            let mut traj = if out.done {
                crate::cmdp::Trajectory {
                    transitions: vec![],
                    seed: ep_seed,
                }
            } else {
                let mut prng = rng::stream(ep_seed, 0x6d63);
                continue_episode(policy, e.as_mut(), out.obs, &mut prng, ep_seed)?
            };
            traj.transitions.insert(0, first);
            Ok((
                discounted_return(&traj, gamma, Channel::Reward),
                discounted_return(&traj, gamma, Channel::Cost),
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = returns.len() as f64;
    Ok((
        returns.iter().map(|x| x.0).sum::<f64>() / n,
        returns.iter().map(|x| x.1).sum::<f64>() / n,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Pairs drawn from the offline dataset.
    Dataset,
    /// Uniform states from the environment and uniform actions.
    Random,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Dataset => "dataset",
            ProbeMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rho_q_before: f64,
    pub rho_q_after: f64,
    pub rho_qc_before: f64,
    pub rho_qc_after: f64,
    pub mode: ProbeMode,
    pub n_probes: usize,
    pub n_rollouts: usize,
    /// Set when a prediction or ground-truth list was constant and the
    /// corresponding coefficient was reported as 0.
    pub degenerate: bool,
}

pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_ROLLOUTS: usize = 10;

/// Probe pairs for an alignment report.
pub fn probe_pairs(
    env: &dyn Environment,
    ds: Option<&OfflineDataset>,
    mode: ProbeMode,
    count: usize,
    rng: &mut SimRng,
) -> Result<Vec<(Vec<f64>, Action)>> {
    (0..count)
        .map(|_| match mode {
            ProbeMode::Dataset => {
                let ds = ds.ok_or_else(|| Error::InvalidArgument("dataset probes need a dataset".into()))?;
                if ds.is_empty() {
                    return Err(Error::Empty("offline dataset"));
                }
                let t = &ds.transitions[rng.random_range(0..ds.len())];
                Ok((t.s.clone(), t.a.clone()))
            }
            ProbeMode::Random => {
                let s = env.random_state(rng)?;
                Ok((s, env.spec().action_space.sample_uniform(rng)))
            }
        })
        .collect()
}

/// Spearman coefficients between critic predictions before and after VPA
/// and Monte-Carlo estimates of the policy's Q and Qc on shared probes.
pub fn alignment_report<P: Policy + ?Sized>(
    policy: &P,
    env: &dyn Environment,
    before: (&Mlp, &Mlp),
    after: (&Mlp, &Mlp),
    probes: &[(Vec<f64>, Action)],
    mode: ProbeMode,
    n_rollouts: usize,
    seed: u64,
) -> Result<AlignmentReport> {
    if probes.len() < 2 {
        return Err(Error::InvalidArgument("alignment needs at least two probes".into()));
    }
    let spec = env.spec();
    let space = &spec.action_space;
    let mut truth_q = Vec::with_capacity(probes.len());
    let mut truth_qc = Vec::with_capacity(probes.len());
    for (i, (s, a)) in probes.iter().enumerate() {
        let (q, qc) = mc_q_estimate(policy, env, s, a, spec.gamma, n_rollouts, rng::derive_seed(seed, i as u64))?;
        truth_q.push(q);
        truth_qc.push(qc);
    }
    let predict = |net: &Mlp| -> Result<Vec<f64>> {
        probes.iter().map(|(s, a)| net.value(&critic_input(space, s, a))).collect()
    };
    AlignmentReport::from_values(
        [&predict(before.0)?, &predict(after.0)?],
        [&predict(before.1)?, &predict(after.1)?],
        &truth_q,
        &truth_qc,
        mode,
        n_rollouts,
    )
}

impl AlignmentReport {
    /// Coefficients from prediction lists (`[before, after]`) and ground truth.
    pub fn from_values(
        q: [&[f64]; 2],
        qc: [&[f64]; 2],
        truth_q: &[f64],
        truth_qc: &[f64],
        mode: ProbeMode,
        n_rollouts: usize,
    ) -> Result<Self> {
        let mut degenerate = false;
        let mut rho = |pred: &[f64], truth: &[f64]| -> Result<f64> {
            match spearman_rho(pred, truth) {
                Ok(r) => Ok(r),
                Err(Error::Degenerate(_)) => {
                    degenerate = true;
                    Ok(0.0)
                }
                Err(e) => Err(e),
            }
        };
        Ok(Self {
            rho_q_before: rho(q[0], truth_q)?,
            rho_q_after: rho(q[1], truth_q)?,
            rho_qc_before: rho(qc[0], truth_qc)?,
            rho_qc_after: rho(qc[1], truth_qc)?,
            mode,
            n_probes: truth_q.len(),
            n_rollouts,
            degenerate,
        })
    }
}

pub const REPORT_CSV_HEADER: &str = "env,mode,channel,stage,rho";

pub fn write_report_csv<W: Write>(columns: &[(String, AlignmentReport)], mut w: W) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for (env, r) in columns {
        for (channel, stage, v) in [
            ("q", "before", r.rho_q_before),
            ("q", "after", r.rho_q_after),
            ("qc", "before", r.rho_qc_before),
            ("qc", "after", r.rho_qc_after),
        ] {
            writeln!(w, "{env},{},{channel},{stage},{v}", r.mode.name())?;
        }
    }
    Ok(())
}

/// Text table with rows Q-value/Qc-value x before/after and one column per
/// `(environment, probe mode)`.
pub fn render_table(columns: &[(String, AlignmentReport)]) -> String {
    let width = 10;
    let mut out = String::new();
    let mut envs: Vec<(&str, usize)> = Vec::new();
    for (env, _) in columns {
        match envs.last_mut() {
            Some((name, n)) if *name == env.as_str() => *n += 1,
            _ => envs.push((env.as_str(), 1)),
        }
    }
    let _ = write!(out, "{:<10}{:<8}", "", "VPA");
    for (name, n) in &envs {
        let _ = write!(out, "{:^w$}", name, w = width * n);
    }
    out.push('\n');
    let _ = write!(out, "{:<18}", "");
    for (_, r) in columns {
        let _ = write!(out, "{:>w$}", r.mode.name(), w = width);
    }
    out.push('\n');
    let rows: [(&str, &str, fn(&AlignmentReport) -> f64); 4] = [
        ("Q-value", "before", |r| r.rho_q_before),
        ("", "after", |r| r.rho_q_after),
        ("Qc-value", "before", |r| r.rho_qc_before),
        ("", "after", |r| r.rho_qc_after),
    ];
    for (label, stage, get) in rows {
        let _ = write!(out, "{label:<10}{stage:<8}");
        for (_, r) in columns {
            let _ = write!(out, "{:>w$.4}", get(r), w = width);
        }
        out.push('\n');
    }
    out
}
