use super::Mlp;
use crate::error::{Error, Result};

/// Slow-moving copy of a network used for bootstrap targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetNet {
    pub net: Mlp,
}

impl TargetNet {
    pub fn from_net(net: &Mlp) -> Self {
        Self { net: net.clone() }
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    /// `target <- tau * source + (1 - tau) * target`.
    pub fn soft_update(&mut self, source: &[f64], tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} not in [0, 1]")));
        }
        let target = self.net.params_mut();
        if source.len() != target.len() {
            return Err(Error::dim("soft update source", target.len(), source.len()));
        }
        if tau == 1.0 {
            target.copy_from_slice(source);
            return Ok(());
        }
        for (t, s) in target.iter_mut().zip(source) {
            *t = tau * s + (1.0 - tau) * *t;
        }
        Ok(())
    }
}
