use rand::Rng;

use super::linalg::{axpy, dot};
use super::{check_len, NnError, Param, Parameterized};

/// 1-D convolution over character positions followed by max-over-time
/// pooling. Inputs shorter than the window are padded with zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCnn {
    /// `filters × (window · emb_dim)`; column block `k` applies to offset `k`.
    pub filters: Param,
    pub bias: Param,
    pub window: usize,
    pub emb_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CnnTrace {
    pub output: Vec<f64>,
    /// Winning window start for each filter.
    pub argmax: Vec<usize>,
    pub len: usize,
}

impl CharCnn {
    pub fn new<R: Rng>(
        name: &str,
        emb_dim: usize,
        filters: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        CharCnn {
            filters: Param::glorot(format!("{name}.filters"), filters, window * emb_dim, rng),
            bias: Param::zeros(format!("{name}.bias"), filters, 1),
            window,
            emb_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.filters.rows
    }

    fn response(&self, f: usize, start: usize, embs: &[f64], len: usize) -> f64 {
        let row = self.filters.row(f);
        let mut s = self.bias.value[f];
        for k in 0..self.window {
            let pos = start + k;
            if pos < len {
                let e = &embs[pos * self.emb_dim..(pos + 1) * self.emb_dim];
                s += dot(&row[k * self.emb_dim..(k + 1) * self.emb_dim], e);
            }
        }
        s
    }

    /// `embs` is a flat `len × emb_dim` matrix.
    pub fn forward(&self, embs: &[f64]) -> Result<CnnTrace, NnError> {
        if embs.len() % self.emb_dim != 0 {
            return Err(NnError::ShapeMismatch {
                what: "char embeddings".into(),
                expected: self.emb_dim,
                found: embs.len() % self.emb_dim,
            });
        }
        let len = embs.len() / self.emb_dim;
        if len == 0 {
            return Err(NnError::EmptySequence);
        }
        let positions = len.max(self.window) - self.window + 1;
        let mut output = Vec::with_capacity(self.out_dim());
        let mut argmax = Vec::with_capacity(self.out_dim());
        for f in 0..self.out_dim() {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0;
            for start in 0..positions {
                let v = self.response(f, start, embs, len);
                if v > best {
                    best = v;
                    best_at = start;
                }
            }
            output.push(best);
            argmax.push(best_at);
        }
        Ok(CnnTrace {
            output,
            argmax,
            len,
        })
    }

    /// Returns the gradient with respect to the flat character embeddings.
    pub fn backward(
        &mut self,
        embs: &[f64],
        trace: &CnnTrace,
        dout: &[f64],
    ) -> Result<Vec<f64>, NnError> {
        check_len("char cnn output grad", self.out_dim(), dout.len())?;
        let d = self.emb_dim;
        let cols = self.filters.cols;
        let mut dembs = vec![0.0; embs.len()];
        for (f, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[f] += g;
            let start = trace.argmax[f];
            for k in 0..self.window {
                let pos = start + k;
                if pos >= trace.len {
                    break;
                }
                let e = &embs[pos * d..(pos + 1) * d];
                axpy(
                    g,
                    e,
                    &mut self.filters.grad[f * cols + k * d..f * cols + (k + 1) * d],
                );
                axpy(
                    g,
                    &self.filters.value[f * cols + k * d..f * cols + (k + 1) * d],
                    &mut dembs[pos * d..(pos + 1) * d],
                );
            }
        }
        Ok(dembs)
    }
}

impl Parameterized for CharCnn {
    fn params(&self) -> Vec<&Param> {
        vec![&self.filters, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.filters, &mut self.bias]
    }
}

/// Functional form: convolve `embs` (flat `len × emb_dim`) and max-pool.
pub fn char_cnn_forward(cnn: &CharCnn, embs: &[f64]) -> Result<Vec<f64>, NnError> {
    cnn.forward(embs).map(|t| t.output)
}
