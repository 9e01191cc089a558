//! Synthetic cost plant: each episode's cost is `c0 / (1 + lambda)` plus
//! Gaussian noise, floored at zero.

use rand_distr::{Distribution, Normal};

use super::{error_signal, window_stats, Controller, LagrangeState, TickRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostPlant {
    pub c0: f64,
    pub noise_std: f64,
    pub episodes_per_tick: usize,
}

impl CostPlant {
    pub fn cost(&self, lambda: f64, noise: f64) -> f64 {
        (self.c0 / (1.0 + lambda) + noise).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct PlantRun {
    pub records: Vec<TickRecord>,
    /// Every episode cost in order.
    pub episode_costs: Vec<f64>,
}

impl PlantRun {
    /// Mean of the last `n` episode costs observed after each tick.
    pub fn windowed_means(&self, per_tick: usize, n: usize) -> Vec<f64> {
        (0..self.records.len())
            .map(|t| {
                let end = (t + 1) * per_tick;
                let start = end.saturating_sub(n);
                window_stats(&self.episode_costs[start..end]).map(|x| x.0).unwrap_or(0.0)
            })
            .collect()
    }
}

pub fn run_plant(plant: &CostPlant, mut ctl: Controller, c_th: f64, ticks: usize, seed: u64) -> Result<PlantRun> {
    if plant.episodes_per_tick == 0 {
        return Err(Error::InvalidArgument("episodes_per_tick must be positive".into()));
    }
    let normal = Normal::new(0.0, plant.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng::seeded(seed);
    let mut state = LagrangeState::default();
    let mut records = Vec::with_capacity(ticks);
    let mut episode_costs = Vec::with_capacity(ticks * plant.episodes_per_tick);
    for t in 0..ticks {
        let costs: Vec<f64> = (0..plant.episodes_per_tick)
            .map(|_| plant.cost(state.lambda, normal.sample(&mut r)))
            .collect();
        error_signal(&costs, c_th)?;
        let (next, rec) = ctl.tick(state, &costs, c_th, t)?;
        state = next;
        episode_costs.extend(costs);
        records.push(rec);
    }
    Ok(PlantRun { records, episode_costs })
}

/// First tick whose windowed mean cost lies within `band * c_th` of `c_th`.
pub fn settle_tick(windowed: &[f64], c_th: f64, band: f64) -> Option<usize> {
    windowed.iter().position(|m| (m - c_th).abs() <= band * c_th)
}
