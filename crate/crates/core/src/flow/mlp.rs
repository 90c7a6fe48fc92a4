//! Two-layer tanh perceptrons used as the scale and shift subnetworks.
//!
//! Weights live in the model's flat parameter vector; a [`Net`] only records
//! where its slice starts and its shape. Slice layout:
//! `W1 (hidden × n_in) | b1 (hidden) | W2 (n_out × hidden) | b2 (n_out)`, row-major.

/// Soft clamp applied to scale outputs before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Net {
    pub offset: usize,
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub clamp: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct NetCache {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Net {
    pub fn param_count(n_in: usize, hidden: usize, n_out: usize) -> usize {
        hidden * n_in + hidden + n_out * hidden + n_out
    }

    pub fn len(&self) -> usize {
        Self::param_count(self.n_in, self.hidden, self.n_out)
    }

    pub fn w1(&self) -> usize {
        self.offset
    }
    pub fn b1(&self) -> usize {
        self.offset + self.hidden * self.n_in
    }
    pub fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    pub fn b2(&self) -> usize {
        self.w2() + self.n_out * self.hidden
    }

    pub fn forward(&self, p: &[f64], input: &[f64]) -> NetCache {
        debug_assert_eq!(input.len(), self.n_in);
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &p[w1 + j * self.n_in..w1 + (j + 1) * self.n_in];
                let a: f64 = row.iter().zip(input).map(|(w, u)| w * u).sum::<f64>() + p[b1 + j];
                a.tanh()
            })
            .collect();
        let out = (0..self.n_out)
            .map(|o| {
                let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                let raw: f64 = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + p[b2 + o];
                match self.clamp {
                    Some(c) => c * (raw / c).tanh(),
                    None => raw,
                }
            })
            .collect();
        NetCache { hidden, out }
    }

    /// Reverse sweep: accumulates ∂/∂params into `grad` (indexed like `p`) and
    /// ∂/∂input into `in_adj`.
    pub fn backward(
        &self,
        p: &[f64],
        input: &[f64],
        cache: &NetCache,
        out_adj: &[f64],
        grad: &mut [f64],
        in_adj: &mut [f64],
    ) {
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let mut h_adj = vec![0.0; self.hidden];
        for o in 0..self.n_out {
            let raw_adj = match self.clamp {
                Some(c) => {
                    let r = cache.out[o] / c;
                    out_adj[o] * (1.0 - r * r)
                }
                None => out_adj[o],
            };
            grad[b2 + o] += raw_adj;
            for j in 0..self.hidden {
                grad[w2 + o * self.hidden + j] += raw_adj * cache.hidden[j];
                h_adj[j] += p[w2 + o * self.hidden + j] * raw_adj;
            }
        }
        for j in 0..self.hidden {
            let h = cache.hidden[j];
            let a_adj = h_adj[j] * (1.0 - h * h);
            grad[b1 + j] += a_adj;
            for i in 0..self.n_in {
                grad[w1 + j * self.n_in + i] += a_adj * input[i];
                in_adj[i] += p[w1 + j * self.n_in + i] * a_adj;
            }
        }
    }
}
