//! Exact solvers on tabular CMDPs: policy evaluation, Lagrangian value
//! iteration and the constrained optimum by dual bisection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cmdp::Channel;
use crate::error::{Error, Result};

/// Explicit CMDP with `p[s][a][s']`, `r[s][a]`, `c[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCmdp {
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub gamma: f64,
    pub cost_threshold: f64,
    pub eta: Vec<f64>,
}

/// Row-stochastic `|S| x |A|` policy matrix.
pub type PolicyMatrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactQ {
    pub q: Vec<Vec<f64>>,
    pub channel: Channel,
    pub policy: String,
}

impl ExactQ {
    /// `V(s) = sum_a pi(a|s) Q(s, a)`.
    pub fn state_values(&self, policy: &PolicyMatrix) -> Vec<f64> {
        self.q
            .iter()
            .zip(policy)
            .map(|(qs, ps)| qs.iter().zip(ps).map(|(q, p)| q * p).sum())
            .collect()
    }
}

const ROW_TOL: f64 = 1e-9;

impl TabularCmdp {
    pub fn new(
        p: Vec<Vec<Vec<f64>>>,
        r: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        gamma: f64,
        cost_threshold: f64,
        eta: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            p,
            r,
            c,
            gamma,
            cost_threshold,
            eta,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn n_actions(&self) -> usize {
        self.r.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states(), self.n_actions());
        if ns == 0 || na == 0 {
            return Err(Error::Empty("tabular cmdp"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if self.r.len() != ns || self.c.len() != ns || self.eta.len() != ns {
            return Err(Error::dim("tabular cmdp states", ns, self.r.len().min(self.c.len()).min(self.eta.len())));
        }
        for s in 0..ns {
            if self.p[s].len() != na || self.r[s].len() != na || self.c[s].len() != na {
                return Err(Error::dim("tabular cmdp actions", na, self.p[s].len()));
            }
            for a in 0..na {
                let row = &self.p[s][a];
                if row.len() != ns {
                    return Err(Error::dim("transition row", ns, row.len()));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "P[{s}][{a}] is not a probability row (sum {sum})"
                    )));
                }
            }
        }
        let eta_sum: f64 = self.eta.iter().sum();
        if (eta_sum - 1.0).abs() > ROW_TOL {
            return Err(Error::InvalidArgument(format!("eta sums to {eta_sum}")));
        }
        Ok(())
    }

    pub fn channel(&self, channel: Channel) -> &Vec<Vec<f64>> {
        match channel {
            Channel::Reward => &self.r,
            Channel::Cost => &self.c,
        }
    }

    pub fn max_reward(&self) -> f64 {
        self.r.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    fn check_policy(&self, policy: &PolicyMatrix) -> Result<()> {
        if policy.len() != self.n_states() {
            return Err(Error::dim("policy rows", self.n_states(), policy.len()));
        }
        for (s, row) in policy.iter().enumerate() {
            if row.len() != self.n_actions() {
                return Err(Error::dim("policy columns", self.n_actions(), row.len()));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// State-to-state transition matrix under `policy`.
    fn p_pi(&self, policy: &PolicyMatrix) -> DMatrix<f64> {
        let ns = self.n_states();
        let mut m = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for (a, pa) in policy[s].iter().enumerate() {
                if *pa == 0.0 {
                    continue;
                }
                for (s2, p) in self.p[s][a].iter().enumerate() {
                    m[(s, s2)] += pa * p;
                }
            }
        }
        m
    }

    /// `max_{s,a} |Q - (X + gamma P pi Q)|`.
    pub fn bellman_residual(&self, policy: &PolicyMatrix, channel: Channel, q: &[Vec<f64>]) -> f64 {
        let x = self.channel(channel);
        let v: Vec<f64> = q
            .iter()
            .zip(policy)
            .map(|(qs, ps)| qs.iter().zip(ps).map(|(q, p)| q * p).sum())
            .collect();
        let mut worst = 0.0f64;
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                let next: f64 = self.p[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                worst = worst.max((q[s][a] - x[s][a] - self.gamma * next).abs());
            }
        }
        worst
    }

    fn q_from_v(&self, channel: Channel, v: &[f64]) -> Vec<Vec<f64>> {
        let x = self.channel(channel);
        (0..self.n_states())
            .map(|s| {
                (0..self.n_actions())
                    .map(|a| {
                        x[s][a] + self.gamma * self.p[s][a].iter().zip(v).map(|(p, v)| p * v).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    /// Discounted state occupancy `eta^T (I - gamma P_pi)^-1`.
    pub fn occupancy(&self, policy: &PolicyMatrix) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let ns = self.n_states();
        let a = (DMatrix::identity(ns, ns) - self.p_pi(policy) * self.gamma).transpose();
        let b = DVector::from_column_slice(&self.eta);
        let d = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Degenerate("singular occupancy system".into()))?;
        Ok(d.iter().cloned().collect())
    }

    /// `sum_s eta(s) V^pi(s)` on the chosen channel.
    pub fn objective(&self, policy: &PolicyMatrix, channel: Channel) -> Result<f64> {
        let q = policy_eval_exact(self, policy, channel, DEFAULT_EVAL_TOL)?;
        Ok(q.state_values(policy).iter().zip(&self.eta).map(|(v, e)| v * e).sum())
    }
}

pub const DEFAULT_EVAL_TOL: f64 = 1e-10;
pub const DEFAULT_COST_TOL: f64 = 1e-8;

pub fn deterministic(choice: &[usize], n_actions: usize) -> PolicyMatrix {
    choice
        .iter()
        .map(|&a| (0..n_actions).map(|k| if k == a { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Exact `Q^pi` by a direct linear solve, refined by fixed-point sweeps
/// until the Bellman residual is within `tol`.
pub fn policy_eval_exact(cmdp: &TabularCmdp, policy: &PolicyMatrix, channel: Channel, tol: f64) -> Result<ExactQ> {
    cmdp.check_policy(policy)?;
    if cmdp.gamma >= 1.0 {
        return Err(Error::InvalidArgument(
            "policy evaluation with gamma = 1 is not a contraction".into(),
        ));
    }
    let ns = cmdp.n_states();
    let x = cmdp.channel(channel);
    let x_pi: Vec<f64> = (0..ns)
        .map(|s| x[s].iter().zip(&policy[s]).map(|(x, p)| x * p).sum())
        .collect();
    let a = DMatrix::identity(ns, ns) - cmdp.p_pi(policy) * cmdp.gamma;
    let v = a
        .lu()
        .solve(&DVector::from_column_slice(&x_pi))
        .ok_or_else(|| Error::Degenerate("singular evaluation system".into()))?;
    let mut q = cmdp.q_from_v(channel, v.as_slice());
    let mut sweeps = 0;
    while cmdp.bellman_residual(policy, channel, &q) > tol {
        let v: Vec<f64> = q
            .iter()
            .zip(policy)
            .map(|(qs, ps)| qs.iter().zip(ps).map(|(q, p)| q * p).sum())
            .collect();
        q = cmdp.q_from_v(channel, &v);
        sweeps += 1;
        if sweeps > 100_000 {
            return Err(Error::Degenerate("evaluation did not reach tolerance".into()));
        }
    }
    Ok(ExactQ {
        q,
        channel,
        policy: format!("tabular[{ns}x{}]", cmdp.n_actions()),
    })
}

/// Plain fixed-point iteration `Q <- X + gamma P pi Q`, for cross-checking.
pub fn policy_eval_iterative(cmdp: &TabularCmdp, policy: &PolicyMatrix, channel: Channel, iters: usize) -> Result<Vec<Vec<f64>>> {
    cmdp.check_policy(policy)?;
    let mut q = vec![vec![0.0; cmdp.n_actions()]; cmdp.n_states()];
    for _ in 0..iters {
        let v: Vec<f64> = q
            .iter()
            .zip(policy)
            .map(|(qs, ps)| qs.iter().zip(ps).map(|(q, p)| q * p).sum())
            .collect();
        let next = cmdp.q_from_v(channel, &v);
        if next == q {
            break;
        }
        q = next;
    }
    Ok(q)
}

/// Optimal deterministic policy for the scalarized reward `r - lambda c`
/// by value iteration; ties break toward the lowest action index.
pub fn lagrangian_vi(cmdp: &TabularCmdp, lambda: f64, tol: f64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    scalarized_vi(cmdp, 1.0, lambda, tol)
}

fn scalarized_vi(cmdp: &TabularCmdp, w_r: f64, w_c: f64, tol: f64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    if cmdp.gamma >= 1.0 {
        return Err(Error::InvalidArgument("value iteration needs gamma < 1".into()));
    }
    let reward: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..na).map(|a| w_r * cmdp.r[s][a] - w_c * cmdp.c[s][a]).collect())
        .collect();
    let mut v = vec![0.0; ns];
    let backup = |v: &[f64]| -> Vec<Vec<f64>> {
        (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| reward[s][a] + cmdp.gamma * cmdp.p[s][a].iter().zip(v).map(|(p, v)| p * v).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let mut iters = 0usize;
    let q = loop {
        let q = backup(&v);
        let next: Vec<f64> = q.iter().map(|qs| qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        iters += 1;
        // |T Q - Q| <= gamma * delta for the Q built from the previous V.
        if cmdp.gamma * delta <= tol || delta == 0.0 {
            break backup(&v);
        }
        if iters > 10_000_000 {
            return Err(Error::Degenerate("value iteration did not converge".into()));
        }
    };
    let scale = q.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let policy = q
        .iter()
        .map(|qs| {
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            qs.iter().position(|x| *x >= best - 1e-12 * scale).unwrap()
        })
        .collect();
    Ok((policy, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedSolution {
    pub lambda: f64,
    /// Stationary policy whose occupancy is the optimal mixture.
    pub policy: PolicyMatrix,
    /// Weight on `infeasible_side` in the occupancy mixture.
    pub mix_weight: f64,
    pub feasible_side: Vec<usize>,
    pub infeasible_side: Vec<usize>,
    pub reward: f64,
    pub cost: f64,
}

/// Reward-maximizing policy subject to `C(pi) <= c_th` on the discounted
/// objective from `eta`, by bisection on the multiplier and mixing the two
/// deterministic policies that bracket the kink.
pub fn constrained_optimum(cmdp: &TabularCmdp, tol: f64) -> Result<ConstrainedSolution> {
    let na = cmdp.n_actions();
    let c_th = cmdp.cost_threshold;
    let eval = |choice: &[usize]| -> Result<(f64, f64)> {
        let pm = deterministic(choice, na);
        Ok((cmdp.objective(&pm, Channel::Reward)?, cmdp.objective(&pm, Channel::Cost)?))
    };

    let (min_cost_pi, _) = scalarized_vi(cmdp, 0.0, 1.0, DEFAULT_EVAL_TOL)?;
    let (_, min_cost) = eval(&min_cost_pi)?;
    if min_cost > c_th + tol {
        return Err(Error::Infeasible(format!(
            "minimum achievable cost {min_cost} exceeds threshold {c_th}"
        )));
    }

    let solution = |lambda: f64, hi: &[usize], lo: Option<&[usize]>| -> Result<ConstrainedSolution> {
        let (r_hi, c_hi) = eval(hi)?;
        let Some(lo) = lo else {
            return Ok(ConstrainedSolution {
                lambda,
                policy: deterministic(hi, na),
                mix_weight: 0.0,
                feasible_side: hi.to_vec(),
                infeasible_side: hi.to_vec(),
                reward: r_hi,
                cost: c_hi,
            });
        };
        let (_, c_lo) = eval(lo)?;
        let w = if c_lo > c_hi { ((c_th - c_hi) / (c_lo - c_hi)).clamp(0.0, 1.0) } else { 0.0 };
        let p_hi = deterministic(hi, na);
        let p_lo = deterministic(lo, na);
        let d_hi = cmdp.occupancy(&p_hi)?;
        let d_lo = cmdp.occupancy(&p_lo)?;
        let policy = (0..cmdp.n_states())
            .map(|s| {
                let (a, b) = (w * d_lo[s], (1.0 - w) * d_hi[s]);
                if a + b <= 0.0 {
                    return p_hi[s].clone();
                }
                (0..na).map(|k| (a * p_lo[s][k] + b * p_hi[s][k]) / (a + b)).collect()
            })
            .collect::<Vec<Vec<f64>>>();
        let reward = cmdp.objective(&policy, Channel::Reward)?;
        let cost = cmdp.objective(&policy, Channel::Cost)?;
        Ok(ConstrainedSolution {
            lambda,
            policy,
            mix_weight: w,
            feasible_side: hi.to_vec(),
            infeasible_side: lo.to_vec(),
            reward,
            cost,
        })
    };

    let (pi0, _) = lagrangian_vi(cmdp, 0.0, DEFAULT_EVAL_TOL)?;
    if eval(&pi0)?.1 <= c_th {
        return solution(0.0, &pi0, None);
    }

    let min_gap = cmdp
        .c
        .iter()
        .flatten()
        .filter(|c| **c > 0.0)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let eps_c = if min_gap.is_finite() { min_gap } else { 1.0 };
    let lambda_max = cmdp.max_reward().max(1e-12) / ((1.0 - cmdp.gamma).max(1e-12) * eps_c.min(1.0) * tol.max(1e-12).sqrt());

    let mut lo = (0.0, pi0);
    let mut hi_lambda = 1.0;
    let mut hi_pi = loop {
        let (pi, _) = lagrangian_vi(cmdp, hi_lambda, DEFAULT_EVAL_TOL)?;
        if eval(&pi)?.1 <= c_th {
            break pi;
        }
        lo = (hi_lambda, pi);
        hi_lambda *= 2.0;
        if hi_lambda > lambda_max {
            // Fall back to the minimum-cost policy, feasible by the check above.
            break min_cost_pi.clone();
        }
    };
    for _ in 0..200 {
        if hi_lambda - lo.0 <= 1e-13 * (1.0 + hi_lambda) {
            break;
        }
        let mid = 0.5 * (lo.0 + hi_lambda);
        let (pi, _) = lagrangian_vi(cmdp, mid, DEFAULT_EVAL_TOL)?;
        let (_, c) = eval(&pi)?;
        if (c - c_th).abs() <= tol {
            return solution(mid, &pi, None);
        }
        if c <= c_th {
            hi_lambda = mid;
            hi_pi = pi;
        } else {
            lo = (mid, pi);
        }
    }
    solution(hi_lambda, &hi_pi, Some(&lo.1))
}
