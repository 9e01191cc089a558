use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully connected network with a fixed hidden nonlinearity and a linear
/// output layer, stored as one flat parameter vector.
///
/// Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs; its block in
/// `params` is the row-major `out x in` weight matrix followed by `out`
/// biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Post-activation values of every layer, input first.
#[derive(Clone, Debug)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl Mlp {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// All-zero network.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have >= 2 positive entries, got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params: vec![0.0; Self::param_count(layer_sizes)],
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, output layer scaled by
    /// `output_scale`; biases zero.
    pub fn init(
        layer_sizes: &[usize],
        activation: Activation,
        output_scale: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        let n_layers = layer_sizes.len() - 1;
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if l + 1 == n_layers {
                bound *= output_scale;
            }
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("parameter vector", net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim("parameter vector", self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn layer(&self, l: usize, input: &[f64], off: usize, last: bool) -> Vec<f64> {
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let z: f64 = row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + b[o];
            out.push(if last {
                z
            } else {
                match self.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                }
            });
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n_layers = self.layer_sizes.len() - 1;
        let mut off = 0;
        let mut cur = x.to_vec();
        for l in 0..n_layers {
            cur = self.layer(l, &cur, off, l + 1 == n_layers);
            off += (self.layer_sizes[l] + 1) * self.layer_sizes[l + 1];
        }
        Ok(cur)
    }

    /// Scalar output of a single-output network.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?[0])
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let n_layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let next = self.layer(l, &acts[l], off, l + 1 == n_layers);
            acts.push(next);
            off += (self.layer_sizes[l] + 1) * self.layer_sizes[l + 1];
        }
        Ok(Trace { acts })
    }

    /// Reverse pass: accumulates `d out / d params` contracted with
    /// `grad_out` into `grad_params` and returns the input gradient.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad_params.len(), self.params.len());
        self.reverse(trace, grad_out, Some(grad_params))
    }

    /// Input gradient only.
    pub fn input_grad(&self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        self.reverse(trace, grad_out, None)
    }

    fn reverse(&self, trace: &Trace, grad_out: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.output_dim());
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += (self.layer_sizes[l] + 1) * self.layer_sizes[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let input = &trace.acts[l];
            let mut delta_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = off + o * fan_in;
                let w = &self.params[row..row + fan_in];
                for i in 0..fan_in {
                    delta_in[i] += w[i] * d;
                }
                if let Some(gp) = grad_params.as_deref_mut() {
                    let g = &mut gp[row..row + fan_in];
                    for i in 0..fan_in {
                        g[i] += d * input[i];
                    }
                    gp[off + fan_in * fan_out + o] += d;
                }
            }
            if l > 0 && self.activation == Activation::Tanh {
                for (di, a) in delta_in.iter_mut().zip(input) {
                    *di *= 1.0 - a * a;
                }
            }
            delta = delta_in;
        }
        delta
    }
}
