use std::fs;
use std::path::Path;

use super::checkpoint::{load_critic, load_policy, save_critic, save_policy};
use super::{new_critic, Mlp, StochasticPolicy, TargetNet};
use crate::cmdp::EnvSpec;
use crate::error::Result;
use crate::rng::SimRng;

/// Policy, reward and cost critics, and their target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: StochasticPolicy,
    pub q: Mlp,
    pub qc: Mlp,
    pub q_target: TargetNet,
    pub qc_target: TargetNet,
}

const FILES: [&str; 5] = ["policy.ckpt", "q.ckpt", "qc.ckpt", "q_target.ckpt", "qc_target.ckpt"];

impl Agent {
    /// Fresh networks; targets start as copies of the critics.
    pub fn new(spec: &EnvSpec, hidden: &[usize], init_log_std: f64, rng: &mut SimRng) -> Result<Self> {
        let policy = StochasticPolicy::for_spec(spec, hidden, init_log_std, rng)?;
        let q = new_critic(spec, hidden, rng)?;
        let qc = new_critic(spec, hidden, rng)?;
        Ok(Self {
            q_target: TargetNet::from_net(&q),
            qc_target: TargetNet::from_net(&qc),
            policy,
            q,
            qc,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_policy(&dir.join(FILES[0]), &self.policy, None)?;
        save_critic(&dir.join(FILES[1]), &self.q, None)?;
        save_critic(&dir.join(FILES[2]), &self.qc, None)?;
        save_critic(&dir.join(FILES[3]), &self.q_target.net, None)?;
        save_critic(&dir.join(FILES[4]), &self.qc_target.net, None)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            policy: load_policy(&dir.join(FILES[0]))?,
            q: load_critic(&dir.join(FILES[1]))?,
            qc: load_critic(&dir.join(FILES[2]))?,
            q_target: TargetNet {
                net: load_critic(&dir.join(FILES[3]))?,
            },
            qc_target: TargetNet {
                net: load_critic(&dir.join(FILES[4]))?,
            },
        })
    }

    pub fn exists_in(dir: &Path) -> bool {
        FILES.iter().all(|f| dir.join(f).is_file())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{PointCircle, PointConfig};
    use crate::cmdp::Environment;
    use crate::rng;

    #[test]
    fn directory_round_trip_is_exact() {
        let env = PointCircle::new(PointConfig::default()).unwrap();
        let agent = Agent::new(env.spec(), &[8, 8], -0.5, &mut rng::seeded(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        agent.save_dir(dir.path()).unwrap();
        assert!(Agent::exists_in(dir.path()));
        assert_eq!(Agent::load_dir(dir.path()).unwrap(), agent);
    }
}
