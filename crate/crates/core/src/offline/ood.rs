use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::OfflineDataset;
use crate::cmdp::{critic_input, Action, ActionSpace};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_QUANTILE: f64 = 0.95;
/// Upper bound on distinct reference points kept for neighbor queries.
pub const DEFAULT_REFERENCE_CAP: usize = 4000;
const CALIBRATION_POINTS: usize = 2000;
const MAX_TRIES: usize = 10_000;

/// Nearest-neighbor support model over `(s, a)` critic inputs. A candidate
/// is out of distribution when its k-th neighbor distance exceeds the
/// `quantile` of leave-one-out neighbor distances inside the dataset.
#[derive(Clone, Debug)]
pub struct OodSampler {
    pub space: ActionSpace,
    pub k: usize,
    pub quantile: f64,
    pub threshold: f64,
    refs: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodDraw {
    pub actions: Vec<Action>,
    /// Set when too few candidates were out of distribution and the
    /// farthest candidates were returned instead.
    pub warning: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl OodSampler {
    pub fn fit(ds: &OfflineDataset, space: &ActionSpace, k: usize, quantile: f64, cap: usize, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("offline dataset"));
        }
        if k == 0 || !(0.0..=1.0).contains(&quantile) || cap == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid sampler settings k={k} quantile={quantile} cap={cap}"
            )));
        }
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut refs: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for t in &ds.transitions {
            let x = critic_input(space, &t.s, &t.a);
            let id = *index.entry(key(&x)).or_insert_with(|| {
                refs.push(x);
                counts.push(0);
                refs.len() - 1
            });
            counts[id] += 1;
        }
        let mut r = rng::seeded(rng::derive_seed(seed, 0x6f6f64));
        if refs.len() > cap {
            let mut order: Vec<usize> = (0..refs.len()).collect();
            order.shuffle(&mut r);
            order.truncate(cap);
            order.sort_unstable();
            refs = order.iter().map(|&i| refs[i].clone()).collect();
            counts = order.iter().map(|&i| counts[i]).collect();
        }
        let mut sampler = Self {
            space: space.clone(),
            k,
            quantile,
            threshold: 0.0,
            refs,
            counts,
        };
        // Calibrate on reference points drawn in proportion to their counts,
        // leaving one copy of the point itself out.
        let total: usize = sampler.counts.iter().sum();
        let n_cal = total.min(CALIBRATION_POINTS);
        let mut cumulative = Vec::with_capacity(sampler.counts.len());
        let mut acc = 0;
        for c in &sampler.counts {
            acc += c;
            cumulative.push(acc);
        }
        let mut dists: Vec<f64> = (0..n_cal)
            .map(|_| {
                let u = r.random_range(0..total);
                let i = cumulative.partition_point(|&c| c <= u);
                sampler.knn_distance_excluding(&sampler.refs[i], Some(i))
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        let rank = ((quantile * n_cal as f64).ceil() as usize).clamp(1, n_cal);
        sampler.threshold = dists[rank - 1];
        Ok(sampler)
    }

    pub fn with_defaults(ds: &OfflineDataset, space: &ActionSpace, seed: u64) -> Result<Self> {
        Self::fit(ds, space, DEFAULT_K, DEFAULT_QUANTILE, DEFAULT_REFERENCE_CAP, seed)
    }

    pub fn n_references(&self) -> usize {
        self.refs.len()
    }

    fn knn_distance_excluding(&self, x: &[f64], skip_one: Option<usize>) -> f64 {
        // (squared distance, multiplicity) of the closest points, ascending,
        // trimmed so the multiplicities just cover k.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        let mut covered = 0usize;
        for (i, (r, &c)) in self.refs.iter().zip(&self.counts).enumerate() {
            let c = if skip_one == Some(i) { c - 1 } else { c };
            if c == 0 {
                continue;
            }
            let d = sq_dist(x, r);
            if covered >= self.k && d >= best.last().unwrap().0 {
                continue;
            }
            let pos = best.partition_point(|e| e.0 <= d);
            best.insert(pos, (d, c));
            covered += c;
            while covered - best.last().unwrap().1 >= self.k {
                covered -= best.pop().unwrap().1;
            }
        }
        match best.last() {
            Some(e) => e.0.sqrt(),
            None => f64::INFINITY,
        }
    }

    /// Distance from `(s, a)` to its k-th nearest dataset pair.
    pub fn knn_distance(&self, s: &[f64], a: &Action) -> f64 {
        self.knn_distance_excluding(&critic_input(&self.space, s, a), None)
    }

    pub fn is_ood(&self, s: &[f64], a: &Action) -> bool {
        self.knn_distance(s, a) > self.threshold
    }

    /// `n` out-of-distribution actions at `s`. Discrete spaces test every
    /// action; continuous spaces rejection-sample uniform candidates.
    pub fn ood_sample(&self, s: &[f64], n: usize, rng: &mut SimRng) -> OodDraw {
        match &self.space {
            ActionSpace::Discrete { n: na } => {
                let scored: Vec<(usize, f64)> = (0..*na)
                    .map(|a| (a, self.knn_distance(s, &Action::Discrete(a))))
                    .collect();
                let ood: Vec<usize> = scored.iter().filter(|(_, d)| *d > self.threshold).map(|x| x.0).collect();
                if ood.is_empty() {
                    let far = scored.iter().max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0))).unwrap().0;
                    return OodDraw {
                        actions: vec![Action::Discrete(far); n],
                        warning: true,
                    };
                }
                OodDraw {
                    actions: (0..n).map(|_| Action::Discrete(ood[rng.random_range(0..ood.len())])).collect(),
                    warning: false,
                }
            }
            ActionSpace::Continuous { .. } => {
                let mut found = Vec::with_capacity(n);
                let mut fallback: Vec<(f64, Action)> = Vec::new();
                let mut tries = 0;
                while found.len() < n && tries < MAX_TRIES {
                    tries += 1;
                    let a = self.space.sample_uniform(rng);
                    let d = self.knn_distance(s, &a);
                    if d > self.threshold {
                        found.push(a);
                    } else {
                        fallback.push((d, a));
                    }
                }
                let warning = found.len() < n;
                if warning {
                    fallback.sort_by(|x, y| y.0.total_cmp(&x.0));
                    found.extend(fallback.into_iter().map(|x| x.1).take(n - found.len()));
                }
                OodDraw { actions: found, warning }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::Transition;
    use rand_distr::{Distribution, Normal};

    fn ds_from(pairs: Vec<(Vec<f64>, Action)>) -> OfflineDataset {
        let transitions = pairs
            .into_iter()
            .map(|(s, a)| Transition {
                s2: s.clone(),
                s,
                a,
                r: 0.0,
                c: 0.0,
                done: false,
            })
            .collect();
        OfflineDataset::new(transitions, "fixture", "fixture", 0)
    }

    fn one_hot(i: usize, n: usize) -> Vec<f64> {
        (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn full_coverage_has_no_ood_actions() {
        let mut pairs = Vec::new();
        for s in 0..3 {
            for a in 0..4 {
                for _ in 0..10 {
                    pairs.push((one_hot(s, 3), Action::Discrete(a)));
                }
            }
        }
        let space = ActionSpace::Discrete { n: 4 };
        let sampler = OodSampler::with_defaults(&ds_from(pairs), &space, 1).unwrap();
        for s in 0..3 {
            let draw = sampler.ood_sample(&one_hot(s, 3), 4, &mut rng::seeded(2));
            assert!(draw.warning);
            assert_eq!(draw.actions.len(), 4);
        }
    }

    #[test]
    fn singleton_support_makes_the_rest_ood() {
        let pairs = (0..200).map(|i| (one_hot(i % 5, 5), Action::Discrete(0))).collect();
        let space = ActionSpace::Discrete { n: 4 };
        let sampler = OodSampler::with_defaults(&ds_from(pairs), &space, 1).unwrap();
        for s in 0..5 {
            let obs = one_hot(s, 5);
            assert!(!sampler.is_ood(&obs, &Action::Discrete(0)));
            for a in 1..4 {
                assert!(sampler.is_ood(&obs, &Action::Discrete(a)));
            }
            let draw = sampler.ood_sample(&obs, 50, &mut rng::seeded(s as u64));
            assert!(!draw.warning);
            assert!(draw.actions.iter().all(|a| *a != Action::Discrete(0)));
        }
    }

    #[test]
    fn clustered_continuous_actions_push_samples_outward() {
        let mut r = rng::seeded(5);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let pairs: Vec<(Vec<f64>, Action)> = (0..1500)
            .map(|_| (vec![0.0], Action::Continuous(vec![normal.sample(&mut r), normal.sample(&mut r)])))
            .collect();
        let mut radii: Vec<f64> = pairs
            .iter()
            .map(|(_, a)| a.values().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        radii.sort_by(f64::total_cmp);
        let r_q = radii[(0.95 * radii.len() as f64).ceil() as usize - 1];
        let space = ActionSpace::Continuous { low: vec![-1.0, -1.0], high: vec![1.0, 1.0] };
        let sampler = OodSampler::with_defaults(&ds_from(pairs), &space, 1).unwrap();
        let draw = sampler.ood_sample(&[0.0], 500, &mut r);
        assert!(!draw.warning);
        let norms: Vec<f64> = draw.actions.iter().map(|a| a.values().iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let above = norms.iter().filter(|n| **n > r_q).count();
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(above as f64 >= 0.95 * norms.len() as f64, "{above}/{}", norms.len());
        assert!(min > 0.9 * r_q, "{min} vs {r_q}");
    }

    #[test]
    fn knn_counts_duplicates() {
        let mut pairs = vec![(vec![0.0], Action::Continuous(vec![0.0])); 3];
        pairs.push((vec![0.0], Action::Continuous(vec![0.5])));
        pairs.push((vec![0.0], Action::Continuous(vec![-0.75])));
        let space = ActionSpace::Continuous { low: vec![-1.0], high: vec![1.0] };
        let sampler = OodSampler::fit(&ds_from(pairs), &space, 3, 0.5, 100, 0).unwrap();
        assert_eq!(sampler.n_references(), 3);
        assert_eq!(sampler.knn_distance(&[0.0], &Action::Continuous(vec![0.1])), 0.1);
        assert_eq!(sampler.knn_distance(&[0.0], &Action::Continuous(vec![0.3])), 0.3);
        // Three copies at 0 and one at 0.5: the 4th neighbor of 0.25 is at 0.25.
        let s4 = OodSampler::fit(&sampler_ds(), &space, 4, 0.5, 100, 0).unwrap();
        assert_eq!(s4.knn_distance(&[0.0], &Action::Continuous(vec![0.25])), 0.25);
    }

    fn sampler_ds() -> OfflineDataset {
        let mut pairs = vec![(vec![0.0], Action::Continuous(vec![0.0])); 3];
        pairs.push((vec![0.0], Action::Continuous(vec![0.5])));
        ds_from(pairs)
    }
}
