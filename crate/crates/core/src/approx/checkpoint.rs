//! Parameter checkpoints: one JSON header line followed by the parameters as
//! raw little-endian `f64`s.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Activation, Mlp, PolicyHead, StochasticPolicy};
use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const FORMAT: &str = "saferl-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Critic,
    Softmax { n: usize },
    SquashedGaussian { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key as hex.
    pub seed: String,
    /// Stream position in 32-bit words, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SimRng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<SimRng> {
        let bad = || Error::InvalidArgument(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = SimRng::from_seed(seed);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: HeadSpec,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    if header.param_count != params.len() {
        return Err(Error::dim("checkpoint params", header.param_count, params.len()));
    }
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.format != FORMAT {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unknown checkpoint format {:?}", header.format),
        });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::Parse {
            line: 2,
            msg: format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 8,
                bytes.len()
            ),
        });
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

pub fn critic_header(net: &Mlp, rng: Option<&SimRng>) -> CheckpointHeader {
    CheckpointHeader {
        format: FORMAT.into(),
        layer_sizes: net.layer_sizes().to_vec(),
        activation: net.activation(),
        head: HeadSpec::Critic,
        param_count: net.params().len(),
        rng: rng.map(RngState::capture),
    }
}

pub fn policy_header(policy: &StochasticPolicy, rng: Option<&SimRng>) -> CheckpointHeader {
    let head = match &policy.head {
        PolicyHead::Softmax { n } => HeadSpec::Softmax { n: *n },
        PolicyHead::SquashedGaussian { low, high, .. } => HeadSpec::SquashedGaussian {
            low: low.clone(),
            high: high.clone(),
        },
    };
    CheckpointHeader {
        format: FORMAT.into(),
        layer_sizes: policy.net.layer_sizes().to_vec(),
        activation: policy.net.activation(),
        head,
        param_count: policy.n_params(),
        rng: rng.map(RngState::capture),
    }
}

pub fn save_critic(path: &Path, net: &Mlp, rng: Option<&SimRng>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &critic_header(net, rng), net.params())?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn save_policy(path: &Path, policy: &StochasticPolicy, rng: Option<&SimRng>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &policy_header(policy, rng), &policy.flat_params())?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn critic_from(header: &CheckpointHeader, params: Vec<f64>) -> Result<Mlp> {
    if header.head != HeadSpec::Critic {
        return Err(Error::InvalidArgument(format!(
            "expected a critic checkpoint, found {:?}",
            header.head
        )));
    }
    Mlp::from_params(&header.layer_sizes, header.activation, params)
}

pub fn policy_from(header: &CheckpointHeader, params: Vec<f64>) -> Result<StochasticPolicy> {
    let n_net = Mlp::param_count(&header.layer_sizes);
    let (head, n_extra) = match &header.head {
        HeadSpec::Softmax { n } => (PolicyHead::Softmax { n: *n }, 0),
        HeadSpec::SquashedGaussian { low, high } => (
            PolicyHead::SquashedGaussian {
                low: low.clone(),
                high: high.clone(),
                log_std: vec![0.0; low.len()],
            },
            low.len(),
        ),
        HeadSpec::Critic => {
            return Err(Error::InvalidArgument(
                "expected a policy checkpoint, found a critic".into(),
            ))
        }
    };
    if params.len() != n_net + n_extra {
        return Err(Error::dim("policy checkpoint params", n_net + n_extra, params.len()));
    }
    let mut policy = StochasticPolicy {
        net: Mlp::zeros(&header.layer_sizes, header.activation)?,
        head,
    };
    policy.set_flat_params(&params)?;
    Ok(policy)
}

pub fn load_critic(path: &Path) -> Result<Mlp> {
    let (h, p) = read_checkpoint(fs::File::open(path)?)?;
    critic_from(&h, p)
}

pub fn load_policy(path: &Path) -> Result<StochasticPolicy> {
    let (h, p) = read_checkpoint(fs::File::open(path)?)?;
    policy_from(&h, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn critic_round_trip_is_bit_exact() {
        let mut r = rng::seeded(10);
        let net = Mlp::init(&[4, 8, 1], Activation::Tanh, 1.0, &mut r).unwrap();
        let _ = r.random::<u64>();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &critic_header(&net, Some(&r)), net.params()).unwrap();
        let (h, p) = read_checkpoint(buf.as_slice()).unwrap();
        let back = critic_from(&h, p).unwrap();
        assert_eq!(back, net);
        let mut restored = h.rng.unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), r.random::<u64>());
    }

    #[test]
    fn policy_round_trip_keeps_log_std() {
        let mut r = rng::seeded(11);
        let policy = StochasticPolicy {
            net: Mlp::init(&[2, 3, 2], Activation::Tanh, 1.0, &mut r).unwrap(),
            head: PolicyHead::SquashedGaussian {
                low: vec![-1.0, -1.0],
                high: vec![1.0, 1.0],
                log_std: vec![-0.123456789, 0.5],
            },
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &policy_header(&policy, None), &policy.flat_params()).unwrap();
        let (h, p) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(policy_from(&h, p).unwrap(), policy);
    }

    #[test]
    fn truncated_payload_rejected() {
        let net = Mlp::zeros(&[2, 2, 1], Activation::Tanh).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &critic_header(&net, None), net.params()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
