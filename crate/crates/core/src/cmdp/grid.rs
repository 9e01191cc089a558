use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::oracle::TabularCmdp;
use crate::rng::SimRng;

/// Moves in action-index order: east, north, west, south.
const MOVES: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const EAST: usize = 0;
const NORTH: usize = 1;
const WEST: usize = 2;
const SOUTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Side length; odd and at least 3.
    pub size: usize,
    /// Probability that the executed move is replaced by a uniformly random one.
    pub slip: f64,
    pub gamma: f64,
    /// Threshold on the discounted cost of the initial-state distribution.
    pub cost_threshold: f64,
    pub episode_length: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            size: 7,
            slip: 0.1,
            gamma: 0.9,
            cost_threshold: 2.0,
            episode_length: 200,
        }
    }
}

/// Square grid with concentric square rings around the centre cell.
///
/// Taking the counter-clockwise move of the current ring earns
/// `ring / outer_ring`; any action whose intended destination is a boundary
/// cell costs 1. Rewards and costs depend only on `(cell, action)`, so the
/// tabular export reproduces them exactly. Observations are one-hot cells.
#[derive(Clone, Debug)]
pub struct GridCircleWorld {
    cfg: GridConfig,
    spec: EnvSpec,
    cell: Option<usize>,
    t: usize,
    done: bool,
    rng: SimRng,
}

impl GridCircleWorld {
    pub fn new(cfg: GridConfig) -> Result<Self> {
        if cfg.size < 3 || cfg.size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid size must be odd and >= 3, got {}",
                cfg.size
            )));
        }
        if !(0.0..=1.0).contains(&cfg.slip) {
            return Err(Error::InvalidArgument(format!("slip {} not in [0, 1]", cfg.slip)));
        }
        let spec = EnvSpec {
            name: "grid_circle".into(),
            obs_dim: cfg.size * cfg.size,
            action_space: ActionSpace::Discrete { n: 4 },
            gamma: cfg.gamma,
            cost_threshold: cfg.cost_threshold,
            episode_length: cfg.episode_length,
            reward_bound: 1.0,
            cost_bound: 1.0,
            initial_state: "grid_start_cell".into(),
        };
        spec.validate()?;
        Ok(Self {
            cfg,
            spec,
            cell: None,
            t: 0,
            done: false,
            rng: SimRng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn n_cells(&self) -> usize {
        self.cfg.size * self.cfg.size
    }

    fn center(&self) -> i64 {
        (self.cfg.size / 2) as i64
    }

    pub fn outer_ring(&self) -> usize {
        self.cfg.size / 2
    }

    pub fn coords(&self, cell: usize) -> (i64, i64) {
        ((cell % self.cfg.size) as i64, (cell / self.cfg.size) as i64)
    }

    pub fn cell_at(&self, x: i64, y: i64) -> usize {
        y as usize * self.cfg.size + x as usize
    }

    /// Chebyshev distance from the centre cell.
    pub fn ring(&self, cell: usize) -> usize {
        let (x, y) = self.coords(cell);
        let c = self.center();
        (x - c).abs().max((y - c).abs()) as usize
    }

    pub fn is_boundary(&self, cell: usize) -> bool {
        self.ring(cell) == self.outer_ring()
    }

    /// Counter-clockwise move along the cell's ring (none for the centre).
    pub fn ccw_action(&self, cell: usize) -> Option<usize> {
        let (x, y) = self.coords(cell);
        let c = self.center();
        let (dx, dy) = (x - c, y - c);
        let k = dx.abs().max(dy.abs());
        if k == 0 {
            None
        } else if dy == -k && dx < k {
            Some(EAST)
        } else if dx == k && dy < k {
            Some(NORTH)
        } else if dy == k && dx > -k {
            Some(WEST)
        } else {
            Some(SOUTH)
        }
    }

    /// Destination of move `a` from `cell`; walls keep the agent in place.
    pub fn successor(&self, cell: usize, a: usize) -> usize {
        let (x, y) = self.coords(cell);
        let (mx, my) = MOVES[a];
        let n = self.cfg.size as i64;
        let nx = (x + mx).clamp(0, n - 1);
        let ny = (y + my).clamp(0, n - 1);
        self.cell_at(nx, ny)
    }

    pub fn reward(&self, cell: usize, a: usize) -> f64 {
        match self.ccw_action(cell) {
            Some(dir) if dir == a => self.ring(cell) as f64 / self.outer_ring() as f64,
            _ => 0.0,
        }
    }

    pub fn cost(&self, cell: usize, a: usize) -> f64 {
        if self.is_boundary(self.successor(cell, a)) {
            1.0
        } else {
            0.0
        }
    }

    pub fn start_cell(&self) -> usize {
        let c = self.center();
        self.cell_at(c, c - (self.outer_ring() as i64 - 1))
    }

    pub fn one_hot(&self, cell: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_cells()];
        v[cell] = 1.0;
        v
    }

    /// Recovers the cell index from a one-hot observation.
    pub fn cell_of(&self, obs: &[f64]) -> Result<usize> {
        if obs.len() != self.n_cells() {
            return Err(Error::dim("grid observation", self.n_cells(), obs.len()));
        }
        let mut best = 0;
        for (i, v) in obs.iter().enumerate() {
            if *v > obs[best] {
                best = i;
            }
        }
        if obs[best] <= 0.5 {
            return Err(Error::InvalidArgument("observation is not one-hot".into()));
        }
        Ok(best)
    }

    pub fn current_cell(&self) -> Option<usize> {
        self.cell
    }
}

impl Environment for GridCircleWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = SimRng::seed_from_u64(seed);
        self.t = 0;
        self.done = false;
        let cell = self.start_cell();
        self.cell = Some(cell);
        self.one_hot(cell)
    }

    fn step(&mut self, a: &Action) -> Result<StepOutcome> {
        self.spec.action_space.check(a)?;
        let cell = self
            .cell
            .ok_or_else(|| Error::Protocol("step before reset".into()))?;
        if self.done {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let a = a.as_discrete().expect("checked discrete");
        let executed = if self.rng.random::<f64>() < self.cfg.slip {
            self.rng.random_range(0..4)
        } else {
            a
        };
        let reward = self.reward(cell, a);
        let cost = self.cost(cell, a);
        let next = self.successor(cell, executed);
        self.cell = Some(next);
        self.t += 1;
        self.done = self.t >= self.spec.episode_length;
        Ok(StepOutcome {
            obs: self.one_hot(next),
            reward,
            cost,
            done: self.done,
        })
    }

    fn inject(&mut self, obs: &[f64], seed: u64) -> Result<Vec<f64>> {
        let cell = self.cell_of(obs)?;
        self.rng = SimRng::seed_from_u64(seed);
        self.t = 0;
        self.done = false;
        self.cell = Some(cell);
        Ok(self.one_hot(cell))
    }

    fn random_state(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        Ok(self.one_hot(rng.random_range(0..self.n_cells())))
    }

    fn to_tabular(&self) -> Result<TabularCmdp> {
        let ns = self.n_cells();
        let na = 4;
        let mut p = vec![vec![vec![0.0; ns]; na]; ns];
        let mut r = vec![vec![0.0; na]; ns];
        let mut c = vec![vec![0.0; na]; ns];
        let slip = self.cfg.slip;
        for s in 0..ns {
            for a in 0..na {
                p[s][a][self.successor(s, a)] += 1.0 - slip;
                for b in 0..na {
                    p[s][a][self.successor(s, b)] += slip / na as f64;
                }
                r[s][a] = self.reward(s, a);
                c[s][a] = self.cost(s, a);
            }
        }
        let mut eta = vec![0.0; ns];
        eta[self.start_cell()] = 1.0;
        TabularCmdp::new(p, r, c, self.cfg.gamma, self.cfg.cost_threshold, eta)
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridCircleWorld {
        GridCircleWorld::new(GridConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic_start_cell() {
        let mut g = grid();
        let a = g.reset(0);
        let b = g.reset(0);
        assert_eq!(a, b);
        assert_eq!(g.cell_of(&a).unwrap(), g.start_cell());
        assert_eq!(g.reset(12345), a);
    }

    #[test]
    fn ccw_moves_stay_on_ring() {
        let g = grid();
        for cell in 0..g.n_cells() {
            if let Some(a) = g.ccw_action(cell) {
                assert_eq!(g.ring(g.successor(cell, a)), g.ring(cell), "cell {cell}");
            }
        }
    }

    #[test]
    fn protocol_errors() {
        let mut g = grid();
        assert!(matches!(g.step(&Action::Discrete(0)), Err(Error::Protocol(_))));
        g.reset(1);
        assert!(matches!(g.step(&Action::Discrete(7)), Err(Error::ActionBounds(_))));
        for _ in 0..g.spec().episode_length {
            g.step(&Action::Discrete(0)).unwrap();
        }
        assert!(matches!(g.step(&Action::Discrete(0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn rejects_even_size() {
        assert!(GridCircleWorld::new(GridConfig {
            size: 4,
            ..GridConfig::default()
        })
        .is_err());
    }

    #[test]
    fn step_matches_tabular_export() {
        let mut g = grid();
        let t = g.to_tabular().unwrap();
        for s in 0..g.n_cells() {
            for a in 0..4 {
                let obs = g.one_hot(s);
                g.inject(&obs, (s * 4 + a) as u64).unwrap();
                let out = g.step(&Action::Discrete(a)).unwrap();
                assert_eq!(out.reward, t.r[s][a]);
                assert_eq!(out.cost, t.c[s][a]);
                let next = g.cell_of(&out.obs).unwrap();
                assert!(t.p[s][a][next] > 0.0);
            }
        }
    }
}
