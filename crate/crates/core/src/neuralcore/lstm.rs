use rand::Rng;

use super::linalg::{matvec_add, matvec_t_add, outer_add, sigmoid};
use super::{check_len, NnError, Param, Parameterized};

/// Single-direction LSTM. Gate rows are laid out `[input, forget, cell, output]`
/// and the weight matrix acts on `[x_t; h_{t-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub weight: Param,
    pub bias: Param,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LstmTrace {
    /// `[x_t; h_{t-1}]` per step.
    z: Vec<Vec<f64>>,
    /// Activated gates per step, `4 · hidden`.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
}

impl Lstm {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let weight = Param::glorot(format!("{name}.weight"), 4 * hidden, input + hidden, rng);
        let mut bias = Param::zeros(format!("{name}.bias"), 4 * hidden, 1);
        bias.value[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = 1.0);
        Lstm {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, LstmTrace), NnError> {
        if inputs.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let h_dim = self.hidden;
        let cols = self.input + h_dim;
        let mut trace = LstmTrace::default();
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        for x in inputs {
            check_len("lstm input", self.input, x.len())?;
            let mut z = Vec::with_capacity(cols);
            z.extend_from_slice(x);
            z.extend_from_slice(&h);
            let mut pre = self.bias.value.clone();
            matvec_add(&self.weight.value, cols, 0, &z, &mut pre);
            for k in 0..h_dim {
                pre[k] = sigmoid(pre[k]);
                pre[h_dim + k] = sigmoid(pre[h_dim + k]);
                pre[2 * h_dim + k] = pre[2 * h_dim + k].tanh();
                pre[3 * h_dim + k] = sigmoid(pre[3 * h_dim + k]);
            }
            let mut tc = vec![0.0; h_dim];
            for k in 0..h_dim {
                c[k] = pre[h_dim + k] * c[k] + pre[k] * pre[2 * h_dim + k];
                tc[k] = c[k].tanh();
                h[k] = pre[3 * h_dim + k] * tc[k];
            }
            outputs.push(h.clone());
            trace.z.push(z);
            trace.gates.push(pre);
            trace.cells.push(c.clone());
            trace.tanh_cells.push(tc);
        }
        Ok((outputs, trace))
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient with
    /// respect to the output at step `t`.
    pub fn backward(&mut self, trace: &LstmTrace, dhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h_dim = self.hidden;
        let cols = self.input + h_dim;
        let steps = trace.z.len();
        let mut dxs = vec![Vec::new(); steps];
        let mut dh_next = vec![0.0; h_dim];
        let mut dc_next = vec![0.0; h_dim];
        let mut dpre = vec![0.0; 4 * h_dim];
        for t in (0..steps).rev() {
            let gates = &trace.gates[t];
            let tc = &trace.tanh_cells[t];
            for k in 0..h_dim {
                let (i, f, g, o) = (
                    gates[k],
                    gates[h_dim + k],
                    gates[2 * h_dim + k],
                    gates[3 * h_dim + k],
                );
                let c_prev = if t > 0 { trace.cells[t - 1][k] } else { 0.0 };
                let dh = dhs[t][k] + dh_next[k];
                let d_o = dh * tc[k];
                let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                dc_next[k] = dc * f;
                dpre[k] = dc * g * i * (1.0 - i);
                dpre[h_dim + k] = dc * c_prev * f * (1.0 - f);
                dpre[2 * h_dim + k] = dc * i * (1.0 - g * g);
                dpre[3 * h_dim + k] = d_o * o * (1.0 - o);
            }
            for (b, d) in self.bias.grad.iter_mut().zip(&dpre) {
                *b += d;
            }
            outer_add(&mut self.weight.grad, cols, 0, &dpre, &trace.z[t]);
            let mut dz = vec![0.0; cols];
            matvec_t_add(&self.weight.value, cols, 0, &dpre, &mut dz);
            dh_next.copy_from_slice(&dz[self.input..]);
            dz.truncate(self.input);
            dxs[t] = dz;
        }
        dxs
    }
}

impl Parameterized for Lstm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stacked bi-directional LSTM; each position's output is the concatenation
/// of the forward and backward hidden states of the top layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
}

#[derive(Debug, Clone, Default)]
pub struct BiLstmTrace {
    layers: Vec<(LstmTrace, LstmTrace)>,
}

impl BiLstm {
    pub fn new<R: Rng>(
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                (
                    Lstm::new(&format!("{name}.l{l}.fwd"), inp, hidden, rng),
                    Lstm::new(&format!("{name}.l{l}.bwd"), inp, hidden, rng),
                )
            })
            .collect();
        BiLstm { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |(f, _)| f.hidden)
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, BiLstmTrace), NnError> {
        if inputs.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let mut trace = BiLstmTrace::default();
        let mut xs = inputs.to_vec();
        for (fwd, bwd) in &self.layers {
            let (hf, tf) = fwd.forward(&xs)?;
            let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
            let (mut hb, tb) = bwd.forward(&reversed)?;
            hb.reverse();
            xs = hf
                .into_iter()
                .zip(hb)
                .map(|(mut f, b)| {
                    f.extend_from_slice(&b);
                    f
                })
                .collect();
            trace.layers.push((tf, tb));
        }
        Ok((xs, trace))
    }

    pub fn backward(&mut self, trace: &BiLstmTrace, douts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut grads = douts.to_vec();
        for ((fwd, bwd), (tf, tb)) in self.layers.iter_mut().zip(&trace.layers).rev() {
            let h = fwd.hidden;
            let dhf: Vec<Vec<f64>> = grads.iter().map(|g| g[..h].to_vec()).collect();
            let dhb_rev: Vec<Vec<f64>> = grads.iter().rev().map(|g| g[h..].to_vec()).collect();
            let mut dx = fwd.backward(tf, &dhf);
            let dx_b = bwd.backward(tb, &dhb_rev);
            for (d, b) in dx.iter_mut().zip(dx_b.iter().rev()) {
                for (x, y) in d.iter_mut().zip(b) {
                    *x += y;
                }
            }
            grads = dx;
        }
        grads
    }
}

impl Parameterized for BiLstm {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|(f, b)| [&f.weight, &f.bias, &b.weight, &b.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|(f, b)| [&mut f.weight, &mut f.bias, &mut b.weight, &mut b.bias])
            .collect()
    }
}

/// Functional form of [`BiLstm::forward`].
pub fn bilstm_forward(model: &BiLstm, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NnError> {
    model.forward(inputs).map(|(out, _)| out)
}
