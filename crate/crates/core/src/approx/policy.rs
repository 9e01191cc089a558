use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Activation, Mlp};
use crate::cmdp::{Action, ActionSpace, EnvSpec, Policy};
use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyHead {
    /// Categorical distribution over `n` logits.
    Softmax { n: usize },
    /// `a = centre + half_width * tanh(u)`, `u ~ N(net(s), exp(log_std)^2)`,
    /// with a state-independent learnable `log_std`.
    SquashedGaussian {
        low: Vec<f64>,
        high: Vec<f64>,
        log_std: Vec<f64>,
    },
}

/// Per-action objective `f(s, a)` used by [`StochasticPolicy::objective_grad`].
/// Returns the value and, when requested, its gradient with respect to a
/// continuous action.
pub type ActionObjective<'a> = dyn Fn(&[f64], &Action, bool) -> Result<(f64, Option<Vec<f64>>)> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticPolicy {
    pub net: Mlp,
    pub head: PolicyHead,
}

fn log_one_minus_tanh_sq(u: f64) -> f64 {
    // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    let x = -2.0 * u;
    let softplus = if x > 30.0 { x } else { x.exp().ln_1p() };
    2.0 * (LN_2 - u - softplus)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl StochasticPolicy {
    /// Head chosen from the action space; output layer initialized small so
    /// the initial policy is close to uniform / centred.
    pub fn for_spec(spec: &EnvSpec, hidden: &[usize], init_log_std: f64, rng: &mut SimRng) -> Result<Self> {
        let mut sizes = vec![spec.obs_dim];
        sizes.extend_from_slice(hidden);
        match &spec.action_space {
            ActionSpace::Discrete { n } => {
                sizes.push(*n);
                Ok(Self {
                    net: Mlp::init(&sizes, Activation::Tanh, 0.01, rng)?,
                    head: PolicyHead::Softmax { n: *n },
                })
            }
            ActionSpace::Continuous { low, high } => {
                sizes.push(low.len());
                Ok(Self {
                    net: Mlp::init(&sizes, Activation::Tanh, 0.01, rng)?,
                    head: PolicyHead::SquashedGaussian {
                        low: low.clone(),
                        high: high.clone(),
                        log_std: vec![init_log_std; low.len()],
                    },
                })
            }
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.head, PolicyHead::Softmax { .. })
    }

    pub fn n_params(&self) -> usize {
        self.net.params().len()
            + match &self.head {
                PolicyHead::Softmax { .. } => 0,
                PolicyHead::SquashedGaussian { log_std, .. } => log_std.len(),
            }
    }

    /// Network parameters followed by the log standard deviations.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.net.params().to_vec();
        if let PolicyHead::SquashedGaussian { log_std, .. } = &self.head {
            p.extend_from_slice(log_std);
        }
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dim("policy parameters", self.n_params(), p.len()));
        }
        let n = self.net.params().len();
        self.net.set_params(&p[..n])?;
        if let PolicyHead::SquashedGaussian { log_std, .. } = &mut self.head {
            log_std.copy_from_slice(&p[n..]);
        }
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        if let PolicyHead::SquashedGaussian { log_std, .. } = &mut self.head {
            for v in log_std {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }

    /// Action probabilities of a softmax head.
    pub fn probs(&self, s: &[f64]) -> Result<Vec<f64>> {
        match &self.head {
            PolicyHead::Softmax { .. } => Ok(log_softmax(&self.net.forward(s)?)
                .into_iter()
                .map(f64::exp)
                .collect()),
            PolicyHead::SquashedGaussian { .. } => Err(Error::Unsupported(
                "action probabilities of a continuous head".into(),
            )),
        }
    }

    /// Noise for one reparameterized draw: a uniform variate for softmax
    /// heads, standard normals for Gaussian heads.
    pub fn draw_noise(&self, rng: &mut SimRng) -> Vec<f64> {
        match &self.head {
            PolicyHead::Softmax { .. } => vec![rng.random::<f64>()],
            PolicyHead::SquashedGaussian { low, .. } => {
                (0..low.len()).map(|_| rng.sample(StandardNormal)).collect()
            }
        }
    }

    /// Deterministic map from noise to an action and its log-probability.
    pub fn sample_with_noise(&self, s: &[f64], noise: &[f64]) -> Result<(Action, f64)> {
        let out = self.net.forward(s)?;
        match &self.head {
            PolicyHead::Softmax { .. } => {
                let logp = log_softmax(&out);
                let u = noise[0];
                let mut acc = 0.0;
                let mut pick = logp.len() - 1;
                for (i, lp) in logp.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                Ok((Action::Discrete(pick), logp[pick]))
            }
            PolicyHead::SquashedGaussian { low, high, log_std } => {
                if noise.len() != low.len() {
                    return Err(Error::dim("policy noise", low.len(), noise.len()));
                }
                let mut a = Vec::with_capacity(low.len());
                let mut logp = 0.0;
                for i in 0..low.len() {
                    let (c, h) = (0.5 * (high[i] + low[i]), 0.5 * (high[i] - low[i]));
                    let u = out[i] + log_std[i].exp() * noise[i];
                    a.push((c + h * u.tanh()).clamp(low[i], high[i]));
                    logp += -0.5 * noise[i] * noise[i] - log_std[i] - 0.5 * (2.0 * PI).ln() - h.ln()
                        - log_one_minus_tanh_sq(u);
                }
                Ok((Action::Continuous(a), logp))
            }
        }
    }

    pub fn sample_and_logprob(&self, s: &[f64], rng: &mut SimRng) -> Result<(Action, f64)> {
        let noise = self.draw_noise(rng);
        self.sample_with_noise(s, &noise)
    }

    /// Exact log-probability (density for the Gaussian head, including the
    /// squashing correction).
    pub fn log_prob(&self, s: &[f64], a: &Action) -> Result<f64> {
        let out = self.net.forward(s)?;
        match (&self.head, a) {
            (PolicyHead::Softmax { n }, Action::Discrete(i)) => {
                if i >= n {
                    return Err(Error::ActionBounds(format!("index {i} not in 0..{n}")));
                }
                Ok(log_softmax(&out)[*i])
            }
            (PolicyHead::SquashedGaussian { low, high, log_std }, Action::Continuous(v)) => {
                let mut logp = 0.0;
                for i in 0..low.len() {
                    let (c, h) = (0.5 * (high[i] + low[i]), 0.5 * (high[i] - low[i]));
                    let y = ((v[i] - c) / h).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                    let u = y.atanh();
                    let eps = (u - out[i]) / log_std[i].exp();
                    logp += -0.5 * eps * eps - log_std[i] - 0.5 * (2.0 * PI).ln() - h.ln()
                        - log_one_minus_tanh_sq(u);
                }
                Ok(logp)
            }
            _ => Err(Error::ActionBounds(format!("action kind mismatch: {a:?}"))),
        }
    }

    /// Most likely action for softmax heads, squashed mean for Gaussian heads.
    pub fn mode(&self, s: &[f64]) -> Result<Action> {
        let out = self.net.forward(s)?;
        Ok(match &self.head {
            PolicyHead::Softmax { .. } => {
                let mut best = 0;
                for (i, v) in out.iter().enumerate() {
                    if *v > out[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
            PolicyHead::SquashedGaussian { low, high, .. } => Action::Continuous(
                (0..low.len())
                    .map(|i| 0.5 * (high[i] + low[i]) + 0.5 * (high[i] - low[i]) * out[i].tanh())
                    .collect(),
            ),
        })
    }

    /// `E_{a ~ pi(.|s)} [g(a, log pi(a|s))]`: exact over all actions for
    /// softmax heads, a mean over `m` draws for Gaussian heads.
    pub fn expectation<G>(&self, s: &[f64], m: usize, rng: &mut SimRng, mut g: G) -> Result<f64>
    where
        G: FnMut(&Action, f64) -> Result<f64>,
    {
        match &self.head {
            PolicyHead::Softmax { .. } => {
                let logp = log_softmax(&self.net.forward(s)?);
                let mut acc = 0.0;
                for (a, lp) in logp.iter().enumerate() {
                    let p = lp.exp();
                    if p > 0.0 {
                        acc += p * g(&Action::Discrete(a), *lp)?;
                    }
                }
                Ok(acc)
            }
            PolicyHead::SquashedGaussian { .. } => {
                if m == 0 {
                    return Err(Error::InvalidArgument("need at least one action sample".into()));
                }
                let mut acc = 0.0;
                for _ in 0..m {
                    let (a, lp) = self.sample_and_logprob(s, rng)?;
                    acc += g(&a, lp)?;
                }
                Ok(acc / m as f64)
            }
        }
    }

    /// Value and gradient (over [`flat_params`](Self::flat_params)) of
    ///
    /// `J = mean_s E_{a ~ pi(.|s)} [ alpha * log pi(a|s) + f(s, a) ]`.
    ///
    /// Softmax heads take the expectation exactly; Gaussian heads use one
    /// reparameterized draw per state from `noise`.
    pub fn objective_grad(
        &self,
        states: &[Vec<f64>],
        noise: &[Vec<f64>],
        alpha: f64,
        f: &ActionObjective<'_>,
    ) -> Result<(f64, Vec<f64>)> {
        if states.is_empty() {
            return Err(Error::Empty("policy batch"));
        }
        let n_net = self.net.params().len();
        let mut grad = vec![0.0; self.n_params()];
        let scale = 1.0 / states.len() as f64;
        let mut total = 0.0;
        for (k, s) in states.iter().enumerate() {
            let trace = self.net.forward_trace(s)?;
            let out = trace.output();
            match &self.head {
                PolicyHead::Softmax { n } => {
                    let logp = log_softmax(out);
                    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                    let mut g = Vec::with_capacity(*n);
                    for (a, lp) in logp.iter().enumerate() {
                        let (v, _) = f(s, &Action::Discrete(a), false)?;
                        g.push(alpha * lp + v);
                    }
                    let mean: f64 = probs.iter().zip(&g).map(|(p, g)| p * g).sum();
                    total += scale * mean;
                    let dz: Vec<f64> = probs
                        .iter()
                        .zip(&g)
                        .map(|(p, gk)| scale * p * (gk - mean))
                        .collect();
                    self.net.backward(&trace, &dz, &mut grad[..n_net]);
                }
                PolicyHead::SquashedGaussian { low, high, log_std } => {
                    let eps = noise
                        .get(k)
                        .ok_or_else(|| Error::dim("policy noise rows", states.len(), noise.len()))?;
                    let d = low.len();
                    let mut a = Vec::with_capacity(d);
                    let mut us = Vec::with_capacity(d);
                    let mut logp = 0.0;
                    for i in 0..d {
                        let (c, h) = (0.5 * (high[i] + low[i]), 0.5 * (high[i] - low[i]));
                        let u = out[i] + log_std[i].exp() * eps[i];
                        us.push(u);
                        a.push(c + h * u.tanh());
                        logp += -0.5 * eps[i] * eps[i] - log_std[i] - 0.5 * (2.0 * PI).ln() - h.ln()
                            - log_one_minus_tanh_sq(u);
                    }
                    let (v, ga) = f(s, &Action::Continuous(a), true)?;
                    let ga = ga.ok_or_else(|| {
                        Error::Unsupported("objective did not return an action gradient".into())
                    })?;
                    total += scale * (alpha * logp + v);
                    let mut dmu = vec![0.0; d];
                    for i in 0..d {
                        let h = 0.5 * (high[i] - low[i]);
                        let t = us[i].tanh();
                        let du = alpha * 2.0 * t + ga[i] * h * (1.0 - t * t);
                        dmu[i] = scale * du;
                        grad[n_net + i] += scale * (-alpha + du * log_std[i].exp() * eps[i]);
                    }
                    self.net.backward(&trace, &dmu, &mut grad[..n_net]);
                }
            }
        }
        Ok((total, grad))
    }
}

impl Policy for StochasticPolicy {
    fn act(&self, obs: &[f64], rng: &mut SimRng) -> Action {
        self.sample_and_logprob(obs, rng)
            .expect("observation matches policy input")
            .0
    }
}

/// Deterministic evaluation mode of a stochastic policy.
pub struct Greedy<'a>(pub &'a StochasticPolicy);

impl Policy for Greedy<'_> {
    fn act(&self, obs: &[f64], _rng: &mut SimRng) -> Action {
        self.0.mode(obs).expect("observation matches policy input")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn softmax_policy(n: usize) -> StochasticPolicy {
        StochasticPolicy {
            net: Mlp::zeros(&[2, 3, n], Activation::Tanh).unwrap(),
            head: PolicyHead::Softmax { n },
        }
    }

    fn gaussian_1d(mean_bias: f64, log_std: f64) -> StochasticPolicy {
        // single linear layer with zero weights: output = bias
        let net = Mlp::from_params(&[1, 1], Activation::Tanh, vec![0.0, mean_bias]).unwrap();
        StochasticPolicy {
            net,
            head: PolicyHead::SquashedGaussian {
                low: vec![-1.0],
                high: vec![1.0],
                log_std: vec![log_std],
            },
        }
    }

    #[test]
    fn single_action_has_zero_logprob() {
        let p = softmax_policy(1);
        let mut r = rng::seeded(0);
        let (a, lp) = p.sample_and_logprob(&[0.3, 0.1], &mut r).unwrap();
        assert_eq!(a, Action::Discrete(0));
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn uniform_softmax_logprob() {
        let p = softmax_policy(4);
        let mut r = rng::seeded(1);
        let mut seen = [false; 4];
        for _ in 0..200 {
            let (a, lp) = p.sample_and_logprob(&[0.0, 1.0], &mut r).unwrap();
            assert!((lp + 4f64.ln()).abs() < 1e-12);
            seen[a.as_discrete().unwrap()] = true;
        }
        assert!(seen.iter().all(|s| *s));
        let probs = p.probs(&[0.0, 1.0]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logprob_agrees_with_sampling_path() {
        let mut r = rng::seeded(2);
        let spec_low = vec![-2.0, 0.0];
        let spec_high = vec![2.0, 1.0];
        let mut p = StochasticPolicy {
            net: Mlp::init(&[3, 5, 2], Activation::Tanh, 1.0, &mut r).unwrap(),
            head: PolicyHead::SquashedGaussian {
                low: spec_low,
                high: spec_high,
                log_std: vec![-0.3, 0.2],
            },
        };
        p.clamp_log_std();
        for _ in 0..20 {
            let s = vec![r.random::<f64>(), -r.random::<f64>(), 0.5];
            let (a, lp) = p.sample_and_logprob(&s, &mut r).unwrap();
            assert!(lp.is_finite());
            let lp2 = p.log_prob(&s, &a).unwrap();
            assert!((lp - lp2).abs() < 1e-6, "{lp} vs {lp2}");
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let p = gaussian_1d(0.4, -0.2);
        let n = 200_000;
        let mut acc = 0.0;
        for k in 0..n {
            let a = -1.0 + (k as f64 + 0.5) * 2.0 / n as f64;
            acc += p.log_prob(&[0.0], &Action::Continuous(vec![a])).unwrap().exp() * 2.0 / n as f64;
        }
        assert!((acc - 1.0).abs() < 1e-2, "integral {acc}");
    }

    #[test]
    fn gaussian_samples_match_head_parameters() {
        let (mu, ls) = (0.3, -0.5);
        let p = gaussian_1d(mu, ls);
        let mut r = rng::seeded(4);
        let n = 100_000;
        let mut pre = Vec::with_capacity(n);
        let mut hist = vec![0usize; 20];
        for _ in 0..n {
            let (a, _) = p.sample_and_logprob(&[0.0], &mut r).unwrap();
            let v = a.values()[0];
            assert!((-1.0..=1.0).contains(&v));
            pre.push(v.atanh());
            hist[(((v + 1.0) / 2.0 * 20.0) as usize).min(19)] += 1;
        }
        let mean = pre.iter().sum::<f64>() / n as f64;
        let var = pre.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma = f64::exp(ls);
        let se_mean = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean);
        let se_std = sigma / (2.0 * n as f64).sqrt();
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_std);
        // Histogram density against log_prob at bin centres.
        for (b, count) in hist.iter().enumerate() {
            let centre = -1.0 + (b as f64 + 0.5) * 0.1;
            let dens = p.log_prob(&[0.0], &Action::Continuous(vec![centre])).unwrap().exp();
            let emp = *count as f64 / n as f64 / 0.1;
            if dens > 0.2 {
                assert!((emp - dens).abs() / dens < 0.05, "bin {b}: {emp} vs {dens}");
            }
        }
    }

    fn fd_check(p: &StochasticPolicy, states: &[Vec<f64>], noise: &[Vec<f64>], alpha: f64, f: &ActionObjective<'_>) {
        let (_, g) = p.objective_grad(states, noise, alpha, f).unwrap();
        let base = p.flat_params();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut q = p.clone();
            let mut v = base.clone();
            v[k] += h;
            q.set_flat_params(&v).unwrap();
            let fp = q.objective_grad(states, noise, alpha, f).unwrap().0;
            v[k] -= 2.0 * h;
            q.set_flat_params(&v).unwrap();
            let fm = q.objective_grad(states, noise, alpha, f).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err <= 1e-4 || (fd - g[k]).abs() < 1e-9, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut r = rng::seeded(8);
        let states: Vec<Vec<f64>> = (0..4).map(|_| vec![r.random::<f64>() - 0.5, r.random::<f64>()]).collect();
        // Softmax head, per-action values depending on the state.
        let mut p = StochasticPolicy {
            net: Mlp::init(&[2, 4, 3], Activation::Tanh, 1.0, &mut r).unwrap(),
            head: PolicyHead::Softmax { n: 3 },
        };
        let f_disc = |s: &[f64], a: &Action, _: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let i = a.as_discrete().unwrap() as f64;
            Ok(((i + 1.0) * s[0] - 0.3 * i * s[1], None))
        };
        fd_check(&p, &states, &[], 0.1, &f_disc);
        // Gaussian head, quadratic action objective.
        p = StochasticPolicy {
            net: Mlp::init(&[2, 4, 2], Activation::Tanh, 1.0, &mut r).unwrap(),
            head: PolicyHead::SquashedGaussian {
                low: vec![-1.0, -2.0],
                high: vec![1.0, 2.0],
                log_std: vec![-0.4, 0.1],
            },
        };
        let noise: Vec<Vec<f64>> = states.iter().map(|_| p.draw_noise(&mut r)).collect();
        let f_cont = |s: &[f64], a: &Action, _: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let v = a.values();
            let val = (v[0] - s[0]).powi(2) + 0.5 * v[1] * v[1] * s[1];
            Ok((val, Some(vec![2.0 * (v[0] - s[0]), v[1] * s[1]])))
        };
        fd_check(&p, &states, &noise, 0.05, &f_cont);
    }
}
