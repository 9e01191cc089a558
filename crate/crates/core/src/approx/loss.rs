//! Minibatch losses over a closed set of primitives with exact reverse-mode
//! gradients.

use super::Mlp;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum LossTerm {
    /// `weight * mean_i (net(x_i) - y_i)^2`.
    SquaredError {
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        weight: f64,
    },
    /// `weight * mean_i net(x_i)`.
    MeanOutput { inputs: Vec<Vec<f64>>, weight: f64 },
    /// `weight * |params|^2 / 2`.
    ParamNorm { weight: f64 },
    Constant(f64),
}

/// Sum of terms, each evaluated on a scalar-output network.
#[derive(Clone, Debug, Default)]
pub struct Loss {
    pub terms: Vec<LossTerm>,
}

impl Loss {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mse(mut self, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Self {
        self.terms.push(LossTerm::SquaredError {
            inputs,
            targets,
            weight: 1.0,
        });
        self
    }

    pub fn mean_output(mut self, inputs: Vec<Vec<f64>>, weight: f64) -> Self {
        self.terms.push(LossTerm::MeanOutput { inputs, weight });
        self
    }

    pub fn param_norm(mut self, weight: f64) -> Self {
        self.terms.push(LossTerm::ParamNorm { weight });
        self
    }

    pub fn constant(mut self, value: f64) -> Self {
        self.terms.push(LossTerm::Constant(value));
        self
    }
}

fn check_scalar(net: &Mlp) -> Result<()> {
    if net.output_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "output terms need a scalar network, got output dim {}",
            net.output_dim()
        )));
    }
    Ok(())
}

/// Loss value without gradient.
pub fn loss_value(net: &Mlp, loss: &Loss) -> Result<f64> {
    let mut total = 0.0;
    for term in &loss.terms {
        total += match term {
            LossTerm::SquaredError {
                inputs,
                targets,
                weight,
            } => {
                check_scalar(net)?;
                check_batch(inputs, Some(targets))?;
                let mut acc = 0.0;
                for (x, y) in inputs.iter().zip(targets) {
                    let d = net.value(x)? - y;
                    acc += d * d;
                }
                weight * acc / inputs.len() as f64
            }
            LossTerm::MeanOutput { inputs, weight } => {
                check_scalar(net)?;
                check_batch(inputs, None)?;
                let mut acc = 0.0;
                for x in inputs {
                    acc += net.value(x)?;
                }
                weight * acc / inputs.len() as f64
            }
            LossTerm::ParamNorm { weight } => {
                weight * 0.5 * net.params().iter().map(|p| p * p).sum::<f64>()
            }
            LossTerm::Constant(v) => *v,
        };
    }
    Ok(total)
}

fn check_batch(inputs: &[Vec<f64>], targets: Option<&Vec<f64>>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if let Some(t) = targets {
        if t.len() != inputs.len() {
            return Err(Error::dim("loss targets", inputs.len(), t.len()));
        }
    }
    Ok(())
}

/// Loss value and exact gradient with respect to the network parameters.
pub fn loss_grad(net: &Mlp, loss: &Loss) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.params().len()];
    let mut total = 0.0;
    for term in &loss.terms {
        match term {
            LossTerm::SquaredError {
                inputs,
                targets,
                weight,
            } => {
                check_scalar(net)?;
                check_batch(inputs, Some(targets))?;
                let n = inputs.len() as f64;
                for (x, y) in inputs.iter().zip(targets) {
                    let trace = net.forward_trace(x)?;
                    let d = trace.output()[0] - y;
                    total += weight * d * d / n;
                    net.backward(&trace, &[2.0 * weight * d / n], &mut grad);
                }
            }
            LossTerm::MeanOutput { inputs, weight } => {
                check_scalar(net)?;
                check_batch(inputs, None)?;
                let n = inputs.len() as f64;
                for x in inputs {
                    let trace = net.forward_trace(x)?;
                    total += weight * trace.output()[0] / n;
                    net.backward(&trace, &[weight / n], &mut grad);
                }
            }
            LossTerm::ParamNorm { weight } => {
                for (g, p) in grad.iter_mut().zip(net.params()) {
                    total += weight * 0.5 * p * p;
                    *g += weight * p;
                }
            }
            LossTerm::Constant(v) => total += v,
        }
    }
    Ok((total, grad))
}
