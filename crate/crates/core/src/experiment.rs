//! Pipeline wiring: environment choice, scripted behavior policies for
//! dataset collection, controller construction and the variants compared
//! in the desk-scale experiments.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::{Agent, Mlp, StochasticPolicy};
use crate::cmdp::{critic_input, Action, ActionSpace, Channel, Environment, GridCircleWorld, GridConfig, PointCircle, PointConfig, Policy, UniformPolicy};
use crate::error::{Error, Result};
use crate::lagrange::{AdaptivePid, Controller, DualAscent, GainBounds, Pid};
use crate::offline::{generate_dataset, pretrain, Behavior, CpqConfig, OfflineDataset};
use crate::online::{evaluate_policy, finetune_loop, initial_agent, InitMode, MetricRow, SacLagConfig};
use crate::oracle::{policy_eval_exact, PolicyMatrix, DEFAULT_EVAL_TOL};
use crate::rng::{self, SimRng};
use crate::vpa::{vpa_run, AlignmentReport, ProbeMode, VpaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    GridCircle(GridConfig),
    PointCircle(PointConfig),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::GridCircle(_) => "grid_circle",
            EnvConfig::PointCircle(_) => "point_circle",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::GridCircle(c) => Box::new(GridCircleWorld::new(c.clone())?),
            EnvConfig::PointCircle(c) => Box::new(PointCircle::new(c.clone())?),
        })
    }
}

/// Hand-written behavior policies.
///
/// Grid: `ring` follows the current ring counter-clockwise (cost-free from
/// the start cell), `edge` heads for the boundary ring and circles there
/// (full reward, unit cost every step), `random` is uniform.
///
/// Point: `band` circles the reference radius, `tight` circles at
/// `tight_radius` outside the safe band, `random` is uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub kind: String,
    pub weight: f64,
    /// Grid: probability of a uniform action. Point: Gaussian action noise std.
    #[serde(default)]
    pub noise: f64,
    /// Point: commanded speed along the circle.
    #[serde(default = "default_speed")]
    pub speed: f64,
}

fn default_speed() -> f64 {
    1.0
}

pub struct GridScript {
    env: GridCircleWorld,
    edge: bool,
    noise: f64,
}

impl Policy for GridScript {
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action {
        use rand::Rng;
        if rng.random::<f64>() < self.noise {
            return Action::Discrete(rng.random_range(0..4));
        }
        let cell = self.env.cell_of(obs).expect("grid observation");
        if self.edge && !self.env.is_boundary(cell) {
            // step outward along the axis of largest displacement
            let (x, y) = self.env.coords(cell);
            let c = (self.env.config().size / 2) as i64;
            let (dx, dy) = (x - c, y - c);
            let a = if dx.abs() >= dy.abs() {
                if dx >= 0 { 0 } else { 2 }
            } else if dy >= 0 {
                1
            } else {
                3
            };
            return Action::Discrete(a);
        }
        Action::Discrete(self.env.ccw_action(cell).unwrap_or(0))
    }
}

pub struct PointScript {
    radius: f64,
    speed: f64,
    noise: f64,
}

impl PointScript {
    pub fn new(radius: f64, speed: f64, noise: f64) -> Self {
        Self { radius, speed, noise }
    }
}

impl Policy for PointScript {
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action {
        let (x, y) = (obs[0], obs[1]);
        let r = (x * x + y * y).sqrt().max(1e-9);
        let (ux, uy) = (x / r, y / r);
        let radial = 5.0 * (self.radius - r);
        let mut v = [-uy * self.speed + ux * radial, ux * self.speed + uy * radial];
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).expect("positive std");
            for vi in &mut v {
                *vi += n.sample(rng);
            }
        }
        Action::Continuous(v.iter().map(|vi| vi.clamp(-1.0, 1.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub behaviors: Vec<BehaviorSpec>,
    /// Point: radius of the `tight` behavior.
    pub tight_radius: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let b = |kind: &str, weight: f64, noise: f64| BehaviorSpec {
            kind: kind.into(),
            weight,
            noise,
            speed: 1.0,
        };
        Self {
            size: 20_000,
            behaviors: vec![b("ring", 0.4, 0.1), b("edge", 0.3, 0.1), b("random", 0.3, 0.0)],
            tight_radius: 0.5,
        }
    }
}

fn behavior_policy(env: &EnvConfig, ds: &DatasetConfig, b: &BehaviorSpec) -> Result<Box<dyn Policy>> {
    let unknown = || Error::InvalidArgument(format!("unknown behavior '{}' for {}", b.kind, env.name()));
    Ok(match env {
        EnvConfig::GridCircle(c) => {
            let g = GridCircleWorld::new(c.clone())?;
            match b.kind.as_str() {
                "ring" => Box::new(GridScript { env: g, edge: false, noise: b.noise }),
                "edge" => Box::new(GridScript { env: g, edge: true, noise: b.noise }),
                "random" => Box::new(UniformPolicy(g.spec().action_space.clone())),
                _ => return Err(unknown()),
            }
        }
        EnvConfig::PointCircle(c) => match b.kind.as_str() {
            "band" => Box::new(PointScript::new(c.radius, b.speed, b.noise)),
            "tight" => Box::new(PointScript::new(ds.tight_radius, b.speed, b.noise)),
            "random" => Box::new(UniformPolicy(PointCircle::new(c.clone())?.spec().action_space.clone())),
            _ => return Err(unknown()),
        },
    })
}

/// Collects the configured behavior mixture.
pub fn collect_dataset(env: &EnvConfig, ds: &DatasetConfig, seed: u64) -> Result<OfflineDataset> {
    if ds.behaviors.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one behavior".into()));
    }
    let policies = ds
        .behaviors
        .iter()
        .map(|b| behavior_policy(env, ds, b))
        .collect::<Result<Vec<_>>>()?;
    let mix: Vec<Behavior<'_>> = ds
        .behaviors
        .iter()
        .zip(&policies)
        .map(|(b, p)| Behavior {
            name: b.kind.clone(),
            policy: p.as_ref(),
            weight: b.weight,
        })
        .collect();
    generate_dataset(env.build()?.as_ref(), &mix, ds.size, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub dual_lr: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub adapt_alpha: f64,
    pub adapt_beta: f64,
    pub adapt_gamma: f64,
    pub window: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        use crate::lagrange::*;
        Self {
            dual_lr: DEFAULT_DUAL_LR,
            kp: DEFAULT_KP,
            ki: DEFAULT_KI,
            kd: DEFAULT_KD,
            adapt_alpha: DEFAULT_ADAPT,
            adapt_beta: DEFAULT_ADAPT,
            adapt_gamma: DEFAULT_ADAPT,
            window: DEFAULT_WINDOW,
        }
    }
}

impl ControllerConfig {
    pub fn build(&self, kind: &str) -> Result<Controller> {
        let pid = Pid::new(self.kp, self.ki, self.kd);
        match kind {
            "dual" => Ok(Controller::Dual(DualAscent { lr: self.dual_lr })),
            "pid" => Ok(Controller::Pid(pid)),
            "apid" => {
                if self.window == 0 {
                    return Err(Error::InvalidArgument("controller window must be positive".into()));
                }
                let mut a = AdaptivePid::new(pid, self.adapt_alpha, self.adapt_beta, self.adapt_gamma);
                a.bounds = GainBounds::around(&pid, 0.1, 10.0);
                a.window_len = self.window;
                Ok(Controller::Apid(a))
            }
            other => Err(Error::InvalidArgument(format!("unknown controller '{other}'"))),
        }
    }
}

/// Finetuning variants compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// CPQ, then VPA, then SAC-lag with adaptive PID.
    Full,
    /// CPQ checkpoint finetuned directly with dual ascent.
    WarmStart,
    VpaDual,
    ApidOnly,
    VpaPid,
    /// Fresh networks with dual ascent.
    FromScratch,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WarmStart,
        Variant::VpaDual,
        Variant::ApidOnly,
        Variant::VpaPid,
        Variant::FromScratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WarmStart => "warm_start",
            Variant::VpaDual => "vpa_dual",
            Variant::ApidOnly => "apid_only",
            Variant::VpaPid => "vpa_pid",
            Variant::FromScratch => "from_scratch",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant '{name}'")))
    }

    pub fn uses_vpa(self) -> bool {
        matches!(self, Variant::Full | Variant::VpaDual | Variant::VpaPid)
    }

    pub fn controller_kind(self) -> &'static str {
        match self {
            Variant::Full | Variant::ApidOnly => "apid",
            Variant::VpaPid => "pid",
            Variant::WarmStart | Variant::VpaDual | Variant::FromScratch => "dual",
        }
    }

    pub fn init_mode(self) -> InitMode {
        match self {
            Variant::FromScratch => InitMode::FromScratch,
            _ => InitMode::WarmStart,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub cpq: CpqConfig,
    pub vpa: VpaConfig,
    pub sac: SacLagConfig,
    pub controller: ControllerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::PointCircle(PointConfig::default()),
            dataset: DatasetConfig::default(),
            cpq: CpqConfig::default(),
            vpa: VpaConfig::default(),
            sac: SacLagConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale settings for the 7x7 grid: small networks and large
    /// learning rates so pretraining and alignment finish in seconds.
    pub fn grid_preset() -> Self {
        let lr = 1e-3;
        Self {
            env: EnvConfig::GridCircle(GridConfig {
                size: 7,
                ..GridConfig::default()
            }),
            dataset: DatasetConfig {
                size: 10_000,
                ..DatasetConfig::default()
            },
            cpq: CpqConfig {
                psi: 1.0,
                updates: 1000,
                batch: 64,
                lr_policy: lr,
                lr_q: lr,
                lr_qc: lr,
                hidden: vec![32, 32],
                ..CpqConfig::default()
            },
            vpa: VpaConfig {
                steps: 3000,
                batch: 64,
                lr_q: lr,
                lr_qc: lr,
                ..VpaConfig::default()
            },
            sac: SacLagConfig {
                hidden: vec![32, 32],
                batch: 64,
                ..SacLagConfig::default()
            },
            controller: ControllerConfig::default(),
        }
    }

    /// Desk-scale settings for PointCircle with a mixed-quality dataset:
    /// a safe slow circler and an unsafe tight circler.
    pub fn point_preset() -> Self {
        let lr = 3e-4;
        let behavior = |kind: &str, noise: f64| BehaviorSpec {
            kind: kind.into(),
            weight: 0.5,
            noise,
            speed: 1.0,
        };
        Self {
            env: EnvConfig::PointCircle(PointConfig::default()),
            dataset: DatasetConfig {
                size: 20_000,
                behaviors: vec![behavior("band", 0.2), behavior("tight", 0.3)],
                ..DatasetConfig::default()
            },
            cpq: CpqConfig {
                updates: 1000,
                batch: 64,
                lr_policy: lr,
                lr_q: lr,
                lr_qc: lr,
                hidden: vec![64, 64],
                ..CpqConfig::default()
            },
            vpa: VpaConfig {
                steps: 1000,
                batch: 64,
                lr_q: lr,
                lr_qc: lr,
                ..VpaConfig::default()
            },
            sac: SacLagConfig {
                batch: 64,
                total_steps: 500,
                eval_every: 25,
                lr_policy: lr,
                lr_q: lr,
                lr_qc: lr,
                hidden: vec![64, 64],
                ..SacLagConfig::default()
            },
            controller: ControllerConfig::default(),
        }
    }
}

pub const DATASET_STREAM: u64 = 10;
pub const PRETRAIN_STREAM: u64 = 11;
pub const VPA_STREAM: u64 = 12;
pub const FINETUNE_STREAM: u64 = 13;

/// Offline artifacts shared by every variant of one seed.
#[derive(Clone, Debug)]
pub struct OfflineStages {
    pub dataset: OfflineDataset,
    pub pretrained: Agent,
    pub aligned: Agent,
}

pub fn offline_stages(cfg: &PipelineConfig, seed: u64) -> Result<OfflineStages> {
    let env = cfg.env.build()?;
    let spec = env.spec().clone();
    let dataset = collect_dataset(&cfg.env, &cfg.dataset, rng::derive_seed(seed, DATASET_STREAM))?;
    let pretrained = pretrain(&dataset, &spec, &cfg.cpq, rng::derive_seed(seed, PRETRAIN_STREAM))?.agent;
    let aligned = vpa_run(&dataset, pretrained.clone(), &spec, &cfg.vpa, rng::derive_seed(seed, VPA_STREAM))?.agent;
    Ok(OfflineStages {
        dataset,
        pretrained,
        aligned,
    })
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Vec<MetricRow>,
    pub agent: Agent,
}

impl VariantRun {
    pub fn final_row(&self) -> Option<&MetricRow> {
        self.metrics.last()
    }
}

/// SAC-lag settings for a variant: its controller and initialization.
pub fn variant_sac_config(cfg: &PipelineConfig, variant: Variant) -> Result<SacLagConfig> {
    Ok(SacLagConfig {
        controller: cfg.controller.build(variant.controller_kind())?,
        init: variant.init_mode(),
        ..cfg.sac.clone()
    })
}

pub fn run_variant(cfg: &PipelineConfig, stages: &OfflineStages, variant: Variant, seed: u64) -> Result<VariantRun> {
    let mut env = cfg.env.build()?;
    let spec = env.spec().clone();
    let sac = variant_sac_config(cfg, variant)?;
    let start = if variant.uses_vpa() {
        stages.aligned.clone()
    } else {
        stages.pretrained.clone()
    };
    let ft_seed = rng::derive_seed(seed, FINETUNE_STREAM);
    let agent = initial_agent(&spec, &sac, Some(start), ft_seed)?;
    let out = finetune_loop(env.as_mut(), agent, &sac, ft_seed)?;
    Ok(VariantRun {
        variant,
        seed,
        metrics: out.metrics,
        agent: out.agent,
    })
}

/// Final evaluation `(return, cost)` averaged over runs.
pub fn mean_final(runs: &[&VariantRun]) -> Option<(f64, f64)> {
    let rows: Vec<&MetricRow> = runs.iter().filter_map(|r| r.final_row()).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.eval_return).sum::<f64>() / n,
        rows.iter().map(|r| r.eval_cost).sum::<f64>() / n,
    ))
}

/// Greedy evaluation of an agent's policy on a fresh environment.
pub fn evaluate_agent(env: &EnvConfig, agent: &Agent, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut env = env.build()?;
    let ev = evaluate_policy(&agent.policy, env.as_mut(), episodes, seed)?;
    Ok((ev.mean_return, ev.mean_cost))
}

/// Softmax action probabilities of `policy` in every grid cell.
pub fn grid_policy_matrix(env: &GridCircleWorld, policy: &StochasticPolicy) -> Result<PolicyMatrix> {
    (0..env.n_cells()).map(|cell| policy.probs(&env.one_hot(cell))).collect()
}

/// Exact `Q^pi` and `Qc^pi` of a grid policy at each probe pair.
pub fn grid_exact_truth(
    env: &GridCircleWorld,
    policy: &StochasticPolicy,
    probes: &[(Vec<f64>, Action)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tab = env.to_tabular()?;
    let pm = grid_policy_matrix(env, policy)?;
    let exact_q = policy_eval_exact(&tab, &pm, Channel::Reward, DEFAULT_EVAL_TOL)?;
    let exact_c = policy_eval_exact(&tab, &pm, Channel::Cost, DEFAULT_EVAL_TOL)?;
    let mut truth_q = Vec::with_capacity(probes.len());
    let mut truth_c = Vec::with_capacity(probes.len());
    for (s, a) in probes {
        let cell = env.cell_of(s)?;
        let a = a.as_discrete().ok_or_else(|| Error::InvalidArgument("grid probes need discrete actions".into()))?;
        truth_q.push(exact_q.q[cell][a]);
        truth_c.push(exact_c.q[cell][a]);
    }
    Ok((truth_q, truth_c))
}

/// Critic predictions at each probe pair.
pub fn critic_predictions(net: &Mlp, space: &ActionSpace, probes: &[(Vec<f64>, Action)]) -> Result<Vec<f64>> {
    probes.iter().map(|(s, a)| net.value(&critic_input(space, s, a))).collect()
}

/// Alignment report on the grid with exact `Q^pi` and `Qc^pi` as ground
/// truth in place of Monte-Carlo estimates. `policy` is the evaluated
/// (frozen) offline policy.
pub fn exact_alignment(
    env: &GridCircleWorld,
    policy: &StochasticPolicy,
    before: (&Mlp, &Mlp),
    after: (&Mlp, &Mlp),
    probes: &[(Vec<f64>, Action)],
    mode: ProbeMode,
) -> Result<AlignmentReport> {
    let (truth_q, truth_c) = grid_exact_truth(env, policy, probes)?;
    let space = &env.spec().action_space;
    let predict = |net: &Mlp| critic_predictions(net, space, probes);
    AlignmentReport::from_values(
        [&predict(before.0)?, &predict(after.0)?],
        [&predict(before.1)?, &predict(after.1)?],
        &truth_q,
        &truth_c,
        mode,
        0,
    )
}
