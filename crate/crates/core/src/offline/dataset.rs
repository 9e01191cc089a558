use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{rollout, Environment, Policy, Transition};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub behavior: String,
    pub size: usize,
    pub zero_cost_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

pub fn zero_cost_fraction(transitions: &[Transition]) -> f64 {
    if transitions.is_empty() {
        return 0.0;
    }
    transitions.iter().filter(|t| t.c == 0.0).count() as f64 / transitions.len() as f64
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, env: &str, behavior: &str, seed: u64) -> Self {
        let meta = DatasetMeta {
            env: env.to_string(),
            behavior: behavior.to_string(),
            size: transitions.len(),
            zero_cost_fraction: zero_cost_fraction(&transitions),
            seed,
        };
        Self { transitions, meta }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Uniform minibatch with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut SimRng) -> Result<Vec<&'a Transition>> {
        if self.transitions.is_empty() {
            return Err(Error::Empty("offline dataset"));
        }
        Ok((0..n)
            .map(|_| &self.transitions[rng.random_range(0..self.transitions.len())])
            .collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Header { meta: &self.meta })?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header line".into(),
        })??;
        let meta = serde_json::from_str::<HeaderOwned>(&header)
            .map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header: {e}"),
            })?
            .meta;
        let mut transitions = Vec::with_capacity(meta.size);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("{e} (last valid line {})", lineno - 1),
            })?;
            transitions.push(t);
        }
        if transitions.len() != meta.size {
            return Err(Error::Parse {
                line: transitions.len() + 1,
                msg: format!(
                    "header declares {} transitions, found {} (last valid line {})",
                    meta.size,
                    transitions.len(),
                    transitions.len() + 1
                ),
            });
        }
        Ok(Self { transitions, meta })
    }
}

#[derive(Serialize)]
struct Header<'a> {
    meta: &'a DatasetMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderOwned {
    meta: DatasetMeta,
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ds.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    OfflineDataset::read_jsonl(BufReader::new(File::open(path)?))
}

/// One component of a behavior mixture.
pub struct Behavior<'a> {
    pub name: String,
    pub policy: &'a (dyn Policy + 'a),
    pub weight: f64,
}

/// Collects `size` transitions, splitting the budget across behaviors in
/// proportion to their weights. Episodes are rolled out in parallel, each
/// with its own seed derived from `(seed, behavior index, episode index)`.
pub fn generate_dataset(env: &dyn Environment, mix: &[Behavior<'_>], size: usize, seed: u64) -> Result<OfflineDataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    if mix.is_empty() {
        return Err(Error::Empty("behavior mix"));
    }
    let total: f64 = mix.iter().map(|b| b.weight).sum();
    if mix.iter().any(|b| !(b.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("behavior weights must be >= 0 and sum to 1, got {total}")));
    }
    let mut quotas: Vec<usize> = mix.iter().map(|b| (b.weight * size as f64).floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    // Remainder goes to the heaviest component.
    let heaviest = (0..mix.len())
        .max_by(|&i, &j| mix[i].weight.total_cmp(&mix[j].weight).then(j.cmp(&i)))
        .unwrap();
    quotas[heaviest] += size - assigned;

    let episode_len = env.spec().episode_length;
    let mut transitions = Vec::with_capacity(size);
    for (bi, (b, &quota)) in mix.iter().zip(&quotas).enumerate() {
        let mut collected: Vec<Transition> = Vec::with_capacity(quota);
        let mut next_episode = 0u64;
        while collected.len() < quota {
            let need = quota - collected.len();
            let n_eps = need.div_ceil(episode_len) as u64;
            let jobs: Vec<(u64, Box<dyn Environment>)> =
                (next_episode..next_episode + n_eps).map(|ep| (ep, env.clone_box())).collect();
            let episodes: Vec<Result<Vec<Transition>>> = jobs
                .into_par_iter()
                .map(|(ep, mut e)| {
                    let ep_seed = rng::derive_seed(rng::derive_seed(seed, bi as u64), ep);
                    Ok(rollout(b.policy, e.as_mut(), ep_seed)?.transitions)
                })
                .collect();
            next_episode += n_eps;
            for ep in episodes {
                collected.extend(ep?);
            }
        }
        collected.truncate(quota);
        transitions.extend(collected);
    }
    let behavior = mix
        .iter()
        .map(|b| format!("{}:{}", b.name, b.weight))
        .collect::<Vec<_>>()
        .join("+");
    Ok(OfflineDataset::new(transitions, &env.spec().name, &behavior, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{Action, GridCircleWorld, GridConfig, UniformPolicy};

    fn grid() -> GridCircleWorld {
        GridCircleWorld::new(GridConfig::default()).unwrap()
    }

    fn random_grid_dataset(size: usize, seed: u64) -> OfflineDataset {
        let env = grid();
        let pi = UniformPolicy(env.spec().action_space.clone());
        let mix = [Behavior {
            name: "random".into(),
            policy: &pi,
            weight: 1.0,
        }];
        generate_dataset(&env, &mix, size, seed).unwrap()
    }

    #[test]
    fn random_grid_data_is_mostly_cost_free() {
        let ds = random_grid_dataset(10_000, 3);
        assert_eq!(ds.len(), 10_000);
        assert!(ds.meta.zero_cost_fraction > 0.5, "{}", ds.meta.zero_cost_fraction);
        assert_eq!(ds.meta.zero_cost_fraction, zero_cost_fraction(&ds.transitions));
    }

    #[test]
    fn rejects_bad_requests() {
        let env = grid();
        let pi = UniformPolicy(env.spec().action_space.clone());
        let mix = [Behavior {
            name: "random".into(),
            policy: &pi,
            weight: 0.7,
        }];
        assert!(generate_dataset(&env, &mix, 10, 0).is_err());
        let mix = [Behavior {
            name: "random".into(),
            policy: &pi,
            weight: 1.0,
        }];
        assert!(generate_dataset(&env, &mix, 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        random_grid_dataset(1_000, 5).write_jsonl(&mut a).unwrap();
        random_grid_dataset(1_000, 5).write_jsonl(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        random_grid_dataset(1_000, 6).write_jsonl(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_quotas_sum_to_size() {
        let env = grid();
        let pi = UniformPolicy(env.spec().action_space.clone());
        let east = crate::cmdp::FnPolicy(|_: &[f64], _: &mut SimRng| Action::Discrete(0));
        let mix = [
            Behavior { name: "random".into(), policy: &pi, weight: 1.0 / 3.0 },
            Behavior { name: "east".into(), policy: &east, weight: 2.0 / 3.0 },
        ];
        let ds = generate_dataset(&env, &mix, 1_001, 1).unwrap();
        assert_eq!(ds.len(), 1_001);
        let east_count = ds.transitions[333..].iter().filter(|t| t.a == Action::Discrete(0)).count();
        assert_eq!(east_count, 1_001 - 333);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = random_grid_dataset(500, 8);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        assert_eq!(OfflineDataset::read_jsonl(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn truncated_file_names_last_valid_line() {
        let ds = random_grid_dataset(20, 8);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 15];
        match OfflineDataset::read_jsonl(cut.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 21);
                assert!(msg.contains("last valid line 20"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let dropped: String = text.lines().take(15).map(|l| format!("{l}\n")).collect();
        match OfflineDataset::read_jsonl(dropped.as_bytes()) {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("last valid line 15"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_file() {
        let text = r#"{"meta":{"env":"point_circle","behavior":"hand","size":2,"zero_cost_fraction":0.5,"seed":0}}
{"s":[1.0,0.0],"a":[0.5,-0.25],"r":0.5,"c":0.0,"s2":[1.05,-0.025],"done":false}
{"s":[1.05,-0.025],"a":[0.0,1.0],"r":1.0,"c":1.0,"s2":[1.05,0.075],"done":true}
"#;
        let ds = OfflineDataset::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ds.transitions.len(), 2);
        assert_eq!(
            ds.transitions[0],
            Transition {
                s: vec![1.0, 0.0],
                a: Action::Continuous(vec![0.5, -0.25]),
                r: 0.5,
                c: 0.0,
                s2: vec![1.05, -0.025],
                done: false,
            }
        );
        assert_eq!(ds.transitions[1].a, Action::Continuous(vec![0.0, 1.0]));
        assert!(ds.transitions[1].done);
        assert_eq!(zero_cost_fraction(&ds.transitions), ds.meta.zero_cost_fraction);
    }
}
