//! Lagrange multiplier controllers: dual ascent, PID and adaptive PID.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod plant;

pub use plant::{run_plant, settle_tick, CostPlant, PlantRun};

pub const DEFAULT_DUAL_LR: f64 = 1e-4;
pub const DEFAULT_KP: f64 = 1e-4;
pub const DEFAULT_KI: f64 = 1e-5;
pub const DEFAULT_KD: f64 = 1e-5;
pub const DEFAULT_ADAPT: f64 = 0.05;
pub const DEFAULT_WINDOW: usize = 10;
pub const EPS: f64 = 1e-6;

/// Mean episode cost minus the threshold.
pub fn error_signal(episode_costs: &[f64], c_th: f64) -> Result<f64> {
    if episode_costs.is_empty() {
        return Err(Error::Empty("episode costs"));
    }
    Ok(episode_costs.iter().sum::<f64>() / episode_costs.len() as f64 - c_th)
}

/// Sample mean and (n-1) standard deviation; sigma is 0 for a single entry.
pub fn window_stats(window: &[f64]) -> Result<(f64, f64)> {
    let n = window.len();
    if n == 0 {
        return Err(Error::Empty("cost window"));
    }
    let mean = window.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = window.iter().map(|c| (c - mean) * (c - mean)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
}

impl LagrangeState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
        }
        Ok(Self { lambda })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAscent {
    pub lr: f64,
}

impl Default for DualAscent {
    fn default() -> Self {
        Self { lr: DEFAULT_DUAL_LR }
    }
}

pub fn dual_ascent_update(state: LagrangeState, ctl: &DualAscent, e: f64) -> LagrangeState {
    LagrangeState {
        lambda: (state.lambda + ctl.lr * e).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pid {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    pub prev_error: f64,
}

impl Default for Pid {
    fn default() -> Self {
        Self::new(DEFAULT_KP, DEFAULT_KI, DEFAULT_KD)
    }
}

impl Pid {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral: 0.0,
            prev_error: 0.0,
        }
    }
}

/// Discrete PID with a unit tick; the integral and the
/// previous error live in `ctl`.
pub fn pid_update(state: LagrangeState, ctl: &mut Pid, e: f64) -> LagrangeState {
    ctl.integral += e;
    let derivative = e - ctl.prev_error;
    ctl.prev_error = e;
    LagrangeState {
        lambda: (state.lambda + ctl.kp * e + ctl.ki * ctl.integral + ctl.kd * derivative).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainBounds {
    pub kp: (f64, f64),
    pub ki: (f64, f64),
    pub kd: (f64, f64),
}

impl GainBounds {
    /// `[lo x, hi x]` around the given initial gains.
    pub fn around(pid: &Pid, lo: f64, hi: f64) -> Self {
        Self {
            kp: (pid.kp * lo, pid.kp * hi),
            ki: (pid.ki * lo, pid.ki * hi),
            kd: (pid.kd * lo, pid.kd * hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePid {
    pub pid: Pid,
    pub bounds: GainBounds,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub window_len: usize,
    pub window: VecDeque<f64>,
}

impl Default for AdaptivePid {
    fn default() -> Self {
        Self::new(Pid::default(), DEFAULT_ADAPT, DEFAULT_ADAPT, DEFAULT_ADAPT)
    }
}

impl AdaptivePid {
    /// Bounds default to `[0.1x, 10x]` of the initial gains.
    pub fn new(pid: Pid, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            bounds: GainBounds::around(&pid, 0.1, 10.0),
            pid,
            alpha,
            beta,
            gamma,
            window_len: DEFAULT_WINDOW,
            window: VecDeque::new(),
        }
    }

    pub fn push_costs(&mut self, costs: &[f64]) {
        for &c in costs {
            if self.window.len() == self.window_len {
                self.window.pop_front();
            }
            self.window.push_back(c);
        }
    }

    pub fn window_vec(&self) -> Vec<f64> {
        self.window.iter().cloned().collect()
    }
}

/// Multiplicative gain adaptation from window statistics, then clip.
pub fn apid_adapt_gains(ctl: &mut AdaptivePid, window: &[f64], c_th: f64) -> Result<()> {
    let (mean, sigma) = window_stats(window)?;
    let denom = mean.max(EPS);
    let rel = (mean - c_th) / denom;
    let b = ctl.bounds;
    let p = &mut ctl.pid;
    p.kp = (p.kp * (1.0 + ctl.alpha * rel.tanh())).clamp(b.kp.0, b.kp.1);
    p.ki = (p.ki * (1.0 + ctl.beta * rel)).clamp(b.ki.0, b.ki.1);
    p.kd = (p.kd * (1.0 + ctl.gamma * sigma / denom)).clamp(b.kd.0, b.kd.1);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Dual(DualAscent),
    Pid(Pid),
    Apid(AdaptivePid),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub lambda: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub err: f64,
    pub mean_cost: f64,
    pub sigma_cost: f64,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Dual(_) => "dual",
            Controller::Pid(_) => "pid",
            Controller::Apid(_) => "apid",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "dual" => Ok(Controller::Dual(DualAscent::default())),
            "pid" => Ok(Controller::Pid(Pid::default())),
            "apid" => Ok(Controller::Apid(AdaptivePid::default())),
            other => Err(Error::InvalidArgument(format!("unknown controller '{other}'"))),
        }
    }

    /// Gains as logged; dual ascent has none and reports zeros.
    pub fn gains(&self) -> (f64, f64, f64) {
        match self {
            Controller::Dual(_) => (0.0, 0.0, 0.0),
            Controller::Pid(p) => (p.kp, p.ki, p.kd),
            Controller::Apid(a) => (a.pid.kp, a.pid.ki, a.pid.kd),
        }
    }

    /// One controller tick: error from this round's episode costs, multiplier
    /// update with the current gains, then (aPID) window push and adaptation.
    pub fn tick(&mut self, state: LagrangeState, episode_costs: &[f64], c_th: f64, tick: usize) -> Result<(LagrangeState, TickRecord)> {
        let e = error_signal(episode_costs, c_th)?;
        let (next, mean_cost, sigma_cost) = match self {
            Controller::Dual(d) => {
                let (m, s) = window_stats(episode_costs)?;
                (dual_ascent_update(state, d, e), m, s)
            }
            Controller::Pid(p) => {
                let (m, s) = window_stats(episode_costs)?;
                (pid_update(state, p, e), m, s)
            }
            Controller::Apid(a) => {
                let next = pid_update(state, &mut a.pid, e);
                a.push_costs(episode_costs);
                let w = a.window_vec();
                apid_adapt_gains(a, &w, c_th)?;
                let (m, s) = window_stats(&w)?;
                (next, m, s)
            }
        };
        let (kp, ki, kd) = self.gains();
        Ok((
            next,
            TickRecord {
                tick,
                lambda: next.lambda,
                kp,
                ki,
                kd,
                err: e,
                mean_cost,
                sigma_cost,
            },
        ))
    }
}

pub const TRACE_HEADER: &str = "tick,lambda,kp,ki,kd,err,mean_cost,sigma_cost";

pub fn write_trace_csv<W: Write>(records: &[TickRecord], mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.tick, r.lambda, r.kp, r.ki, r.kd, r.err, r.mean_cost, r.sigma_cost
        )?;
    }
    Ok(())
}
