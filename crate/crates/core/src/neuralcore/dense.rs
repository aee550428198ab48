use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{matvec_add, matvec_t_add, outer_add};
use super::{check_len, NnError, Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// `activation(W x + b)` for an `outputs × inputs` weight matrix.
pub fn dense_forward(
    weight: &Param,
    bias: &Param,
    x: &[f64],
    activation: Activation,
) -> Result<Vec<f64>, NnError> {
    check_len("dense input", weight.cols, x.len())?;
    check_len("dense bias", weight.rows, bias.len())?;
    let mut y = bias.value.clone();
    matvec_add(&weight.value, weight.cols, 0, x, &mut y);
    for v in &mut y {
        *v = activation.apply(*v);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: Param::glorot(format!("{name}.weight"), outputs, inputs, rng),
            bias: Param::zeros(format!("{name}.bias"), outputs, 1),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        dense_forward(&self.weight, &self.bias, x, self.activation)
    }

    /// Accumulates parameter gradients given the forward input `x`, the
    /// forward output `y` and `dy = dL/dy`; returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
        let dpre: Vec<f64> = dy
            .iter()
            .zip(y)
            .map(|(g, &out)| g * self.activation.derivative_from_output(out))
            .collect();
        for (b, g) in self.bias.grad.iter_mut().zip(&dpre) {
            *b += g;
        }
        outer_add(&mut self.weight.grad, self.weight.cols, 0, &dpre, x);
        let mut dx = vec![0.0; x.len()];
        matvec_t_add(&self.weight.value, self.weight.cols, 0, &dpre, &mut dx);
        dx
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
