//! Second-order forward propagation.
//!
//! A [`Jets`] holds `m` scalars, each carrying its value, gradient and full
//! Hessian with respect to the same `d` input coordinates.

use crate::flow::mlp::Net;

#[derive(Debug, Clone)]
pub(crate) struct Jets {
    d: usize,
    pub val: Vec<f64>,
    /// m × d
    pub grad: Vec<f64>,
    /// m × d × d
    pub hess: Vec<f64>,
}

impl Jets {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            d,
            val: vec![0.0; m],
            grad: vec![0.0; m * d],
            hess: vec![0.0; m * d * d],
        }
    }

    /// The independent variables themselves: gradient rows form the identity.
    pub fn identity(x: &[f64]) -> Self {
        let d = x.len();
        let mut j = Self::zeros(d, d);
        j.val.copy_from_slice(x);
        for i in 0..d {
            j.grad[i * d + i] = 1.0;
        }
        j
    }

    pub fn len(&self) -> usize {
        self.val.len()
    }

    pub fn grad_of(&self, k: usize) -> &[f64] {
        &self.grad[k * self.d..(k + 1) * self.d]
    }

    pub fn hess_of(&self, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.hess[k * dd..(k + 1) * dd]
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        let d = self.d;
        let mut out = Self {
            d,
            val: Vec::with_capacity(idx.len()),
            grad: Vec::with_capacity(idx.len() * d),
            hess: Vec::with_capacity(idx.len() * d * d),
        };
        for &i in idx {
            out.val.push(self.val[i]);
            out.grad.extend_from_slice(self.grad_of(i));
            out.hess.extend_from_slice(self.hess_of(i));
        }
        out
    }

    pub fn scatter(&mut self, idx: &[usize], src: &Self) {
        let (d, dd) = (self.d, self.d * self.d);
        for (k, &i) in idx.iter().enumerate() {
            self.val[i] = src.val[k];
            self.grad[i * d..(i + 1) * d].copy_from_slice(src.grad_of(k));
            self.hess[i * dd..(i + 1) * dd].copy_from_slice(src.hess_of(k));
        }
    }

    /// `out_o = Σ_i w[o, i] in_i + b_o` with `w` row-major `n_out × len()`.
    pub fn affine(&self, w: &[f64], b: &[f64]) -> Self {
        let n_in = self.len();
        let n_out = b.len();
        let (d, dd) = (self.d, self.d * self.d);
        let mut out = Self::zeros(n_out, d);
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            out.val[o] = b[o];
            for (i, &wi) in row.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                out.val[o] += wi * self.val[i];
                for (g, s) in out.grad[o * d..(o + 1) * d].iter_mut().zip(self.grad_of(i)) {
                    *g += wi * s;
                }
                for (h, s) in out.hess[o * dd..(o + 1) * dd].iter_mut().zip(self.hess_of(i)) {
                    *h += wi * s;
                }
            }
        }
        out
    }

    /// Elementwise `y = f(x)`; `f` returns `(f, f', f'')`.
    pub fn map(&self, f: impl Fn(f64) -> (f64, f64, f64)) -> Self {
        let (d, m) = (self.d, self.len());
        let mut val = Vec::with_capacity(m);
        let mut grad = Vec::with_capacity(m * d);
        let mut hess = Vec::with_capacity(m * d * d);
        for k in 0..m {
            let (v, d1, d2) = f(self.val[k]);
            val.push(v);
            let g = self.grad_of(k);
            grad.extend(g.iter().map(|s| d1 * s));
            let h_in = self.hess_of(k);
            for a in 0..d {
                let ga = d2 * g[a];
                let row = &h_in[a * d..(a + 1) * d];
                hess.extend(row.iter().zip(g).map(|(h, gb)| d1 * h + ga * gb));
            }
        }
        Self { d, val, grad, hess }
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Self {
        let (d, m) = (self.d, self.len());
        let mut val = Vec::with_capacity(m);
        let mut grad = Vec::with_capacity(m * d);
        let mut hess = Vec::with_capacity(m * d * d);
        for k in 0..m {
            let (x, y) = (self.val[k], other.val[k]);
            val.push(x * y);
            let (gx, gy) = (self.grad_of(k), other.grad_of(k));
            grad.extend(gx.iter().zip(gy).map(|(a, b)| x * b + y * a));
            let (hx, hy) = (self.hess_of(k), other.hess_of(k));
            for a in 0..d {
                let r = a * d..(a + 1) * d;
                let (gxa, gya) = (gx[a], gy[a]);
                hess.extend(
                    hx[r.clone()]
                        .iter()
                        .zip(&hy[r])
                        .zip(gx.iter().zip(gy))
                        .map(|((hxv, hyv), (gxb, gyb))| x * hyv + y * hxv + gxa * gyb + gya * gxb),
                );
            }
        }
        Self { d, val, grad, hess }
    }

    /// `self − other`, elementwise.
    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.val.iter_mut().zip(&other.val).for_each(|(a, b)| *a -= b);
        out.grad.iter_mut().zip(&other.grad).for_each(|(a, b)| *a -= b);
        out.hess.iter_mut().zip(&other.hess).for_each(|(a, b)| *a -= b);
        out
    }

    /// Adds `sign · Σ_k self_k` into the single-element jet `acc`.
    pub fn accumulate_sum(&self, sign: f64, acc: &mut Self) {
        let (d, dd) = (self.d, self.d * self.d);
        for k in 0..self.len() {
            acc.val[0] += sign * self.val[k];
            for a in 0..d {
                acc.grad[a] += sign * self.grad[k * d + a];
            }
            for a in 0..dd {
                acc.hess[a] += sign * self.hess[k * dd + a];
            }
        }
    }
}

pub(crate) fn tanh_jet(a: f64) -> (f64, f64, f64) {
    let t = a.tanh();
    let d1 = 1.0 - t * t;
    (t, d1, -2.0 * t * d1)
}

pub(crate) fn neg_exp_jet(a: f64) -> (f64, f64, f64) {
    let e = (-a).exp();
    (e, -e, e)
}

/// Evaluates a subnetwork on jet inputs.
pub(crate) fn net_jets(net: &Net, p: &[f64], input: &Jets) -> Jets {
    let w1 = &p[net.w1()..net.b1()];
    let b1 = &p[net.b1()..net.w2()];
    let w2 = &p[net.w2()..net.b2()];
    let b2 = &p[net.b2()..net.b2() + net.n_out];
    let hidden = input.affine(w1, b1).map(tanh_jet);
    let raw = hidden.affine(w2, b2);
    match net.clamp {
        Some(c) => raw.map(|r| {
            let t = (r / c).tanh();
            let d1 = 1.0 - t * t;
            (c * t, d1, -2.0 * t * d1 / c)
        }),
        None => raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // f(x, y) = tanh(x·y) · exp(−(x − y)); compare against central differences.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let eval = |x: &[f64]| -> Jets {
            let j = Jets::identity(x);
            let a = j.gather(&[0]);
            let b = j.gather(&[1]);
            let prod = a.mul(&b).map(tanh_jet);
            let diff = a.sub(&b).map(neg_exp_jet);
            prod.mul(&diff)
        };
        let f = |x: &[f64]| (x[0] * x[1]).tanh() * (-(x[0] - x[1])).exp();
        let x = [0.7, -0.4];
        let j = eval(&x);
        assert!((j.val[0] - f(&x)).abs() < 1e-15);
        let h = 1e-4;
        for a in 0..2 {
            let mut xp = x;
            xp[a] += h;
            let mut xm = x;
            xm[a] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - j.grad[a]).abs() < 1e-7);
            for b in 0..2 {
                let g = |y: &[f64]| eval(y).grad[b];
                let fd2 = (g(&xp) - g(&xm)) / (2.0 * h);
                assert!((fd2 - j.hess[a * 2 + b]).abs() < 1e-7);
            }
        }
    }
}
