use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointConfig {
    /// Radius of the reference circle.
    pub radius: f64,
    /// Half-width of the safe band around the circle.
    pub band: f64,
    /// Integration step; position advances by `dt * action`.
    pub dt: f64,
    pub gamma: f64,
    pub cost_threshold: f64,
    pub episode_length: usize,
    pub reward_bound: f64,
    /// Positions are clamped to `[-arena, arena]^2`.
    pub arena: f64,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            band: 0.2,
            dt: 0.1,
            gamma: 0.99,
            cost_threshold: 20.0,
            episode_length: 200,
            reward_bound: 3.0,
            arena: 2.0,
        }
    }
}

/// Point mass steered by bounded velocity commands around a circle.
///
/// The reward is counter-clockwise angular progress, normalized so that
/// moving along the reference circle at unit speed earns 1 per step and
/// clipped to `[0, reward_bound]`. Tighter circles turn faster and earn
/// more, but every step that ends outside `| |pos| - radius | <= band`
/// costs 1.
#[derive(Clone, Debug)]
pub struct PointCircle {
    cfg: PointConfig,
    spec: EnvSpec,
    pos: Option<[f64; 2]>,
    t: usize,
    done: bool,
    rng: SimRng,
}

impl PointCircle {
    pub fn new(cfg: PointConfig) -> Result<Self> {
        if cfg.radius <= 0.0 || cfg.band <= 0.0 || cfg.dt <= 0.0 || cfg.arena <= cfg.radius {
            return Err(Error::InvalidArgument(format!(
                "invalid point-circle geometry: {cfg:?}"
            )));
        }
        let spec = EnvSpec {
            name: "point_circle".into(),
            obs_dim: 2,
            action_space: ActionSpace::Continuous {
                low: vec![-1.0, -1.0],
                high: vec![1.0, 1.0],
            },
            gamma: cfg.gamma,
            cost_threshold: cfg.cost_threshold,
            episode_length: cfg.episode_length,
            reward_bound: cfg.reward_bound,
            cost_bound: 1.0,
            initial_state: "point_band_uniform".into(),
        };
        spec.validate()?;
        Ok(Self {
            cfg,
            spec,
            pos: None,
            t: 0,
            done: false,
            rng: SimRng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &PointConfig {
        &self.cfg
    }

    pub fn position(&self) -> Option<[f64; 2]> {
        self.pos
    }

    pub fn in_band(&self, p: [f64; 2]) -> bool {
        ((p[0] * p[0] + p[1] * p[1]).sqrt() - self.cfg.radius).abs() <= self.cfg.band
    }

    /// Reward for moving from `from` to `to`.
    pub fn progress_reward(&self, from: [f64; 2], to: [f64; 2]) -> f64 {
        let cross = from[0] * to[1] - from[1] * to[0];
        let dot = from[0] * to[0] + from[1] * to[1];
        let dtheta = cross.atan2(dot);
        (dtheta * self.cfg.radius / self.cfg.dt).clamp(0.0, self.cfg.reward_bound)
    }
}

impl Environment for PointCircle {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = SimRng::seed_from_u64(seed);
        let theta = 2.0 * PI * self.rng.random::<f64>();
        let r = self.cfg.radius + self.cfg.band * (self.rng.random::<f64>() - 0.5);
        let p = [r * theta.cos(), r * theta.sin()];
        self.pos = Some(p);
        self.t = 0;
        self.done = false;
        p.to_vec()
    }

    fn step(&mut self, a: &Action) -> Result<StepOutcome> {
        self.spec.action_space.check(a)?;
        let p = self
            .pos
            .ok_or_else(|| Error::Protocol("step before reset".into()))?;
        if self.done {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let Action::Continuous(v) = a else {
            unreachable!("checked continuous")
        };
        let lim = self.cfg.arena;
        let next = [
            (p[0] + self.cfg.dt * v[0]).clamp(-lim, lim),
            (p[1] + self.cfg.dt * v[1]).clamp(-lim, lim),
        ];
        let reward = self.progress_reward(p, next);
        let cost = if self.in_band(next) { 0.0 } else { 1.0 };
        self.pos = Some(next);
        self.t += 1;
        self.done = self.t >= self.spec.episode_length;
        Ok(StepOutcome {
            obs: next.to_vec(),
            reward,
            cost,
            done: self.done,
        })
    }

    fn inject(&mut self, obs: &[f64], seed: u64) -> Result<Vec<f64>> {
        if obs.len() != 2 {
            return Err(Error::dim("point observation", 2, obs.len()));
        }
        self.rng = SimRng::seed_from_u64(seed);
        let lim = self.cfg.arena;
        let p = [obs[0].clamp(-lim, lim), obs[1].clamp(-lim, lim)];
        self.pos = Some(p);
        self.t = 0;
        self.done = false;
        Ok(p.to_vec())
    }

    fn random_state(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        let lim = self.cfg.radius + 2.0 * self.cfg.band;
        Ok(vec![
            lim * (2.0 * rng.random::<f64>() - 1.0),
            lim * (2.0 * rng.random::<f64>() - 1.0),
        ])
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
