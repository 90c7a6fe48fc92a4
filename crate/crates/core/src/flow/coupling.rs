//! Affine coupling blocks.
//!
//! A block splits its input into `u1 = x[part_a]` and `u2 = x[part_b]` and maps
//!
//! ```text
//! v1 = u1 ⊙ exp(s2(u2)) + t2(u2)
//! v2 = u2 ⊙ exp(s1(v1)) + t1(v1)
//! ```
//!
//! with inverse `u2 = (v2 − t1(v1)) ⊙ exp(−s1(v1))`, then
//! `u1 = (v1 − t2(u2)) ⊙ exp(−s2(u2))`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Net, NetCache, SCALE_CLAMP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingBlockSpec {
    /// Coordinates forming `u1`.
    pub part_a: Vec<usize>,
    /// Coordinates forming `u2`.
    pub part_b: Vec<usize>,
    /// Width of the hidden layer in every subnetwork.
    pub hidden: usize,
    /// Whether the additive `t` subnetworks are present.
    pub include_t: bool,
}

impl CouplingBlockSpec {
    /// A block with a fresh random split of `0..dim` into halves of size
    /// `dim/2` and `dim - dim/2`, hidden width `max(1, dim/2)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, include_t: bool, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let (a, b) = perm.split_at(dim / 2);
        let mut part_a = a.to_vec();
        let mut part_b = b.to_vec();
        part_a.sort_unstable();
        part_b.sort_unstable();
        Self {
            part_a,
            part_b,
            hidden: (dim / 2).max(1),
            include_t,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.part_a.is_empty() || self.part_b.is_empty() {
            return Err(Error::Precondition("coupling split halves must be non-empty".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Precondition("coupling hidden width must be positive".into()));
        }
        let mut seen = vec![false; dim];
        for &i in self.part_a.iter().chain(&self.part_b) {
            if i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i + 1,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Precondition(format!("coordinate {i} appears twice in split")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.part_a.len() + self.part_b.len(),
            });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (na, nb) = (self.part_a.len(), self.part_b.len());
        let s1 = Net::param_count(na, self.hidden, nb);
        let s2 = Net::param_count(nb, self.hidden, na);
        if self.include_t {
            2 * (s1 + s2)
        } else {
            s1 + s2
        }
    }
}

/// Subnetworks of one block, positioned in the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct BlockNets {
    pub part_a: Vec<usize>,
    pub part_b: Vec<usize>,
    /// Conditioned on v1, acts on u2.
    pub s1: Net,
    pub t1: Option<Net>,
    /// Conditioned on u2, acts on u1.
    pub s2: Net,
    pub t2: Option<Net>,
}

/// Intermediate values of one inverse pass, kept for the reverse sweep.
#[derive(Debug, Clone)]
pub(crate) struct InverseCache {
    pub v1: Vec<f64>,
    pub u2: Vec<f64>,
    pub u1: Vec<f64>,
    pub s1: NetCache,
    pub t1: Option<NetCache>,
    pub s2: NetCache,
    pub t2: Option<NetCache>,
}

impl BlockNets {
    /// Registers this block's subnetworks starting at `offset`; returns the
    /// nets and `(group name, start, len)` entries in storage order.
    pub fn layout(
        index: usize,
        spec: &CouplingBlockSpec,
        mut offset: usize,
    ) -> (Self, Vec<(String, usize, usize)>) {
        let (na, nb) = (spec.part_a.len(), spec.part_b.len());
        let mut groups = Vec::new();
        let mut make = |name: &str, n_in: usize, n_out: usize, clamp: Option<f64>| {
            let net = Net {
                offset,
                n_in,
                hidden: spec.hidden,
                n_out,
                clamp,
            };
            groups.push((format!("block[{index}].{name}"), offset, net.len()));
            offset += net.len();
            net
        };
        let s1 = make("s1", na, nb, Some(SCALE_CLAMP));
        let t1 = spec.include_t.then(|| make("t1", na, nb, None));
        let s2 = make("s2", nb, na, Some(SCALE_CLAMP));
        let t2 = spec.include_t.then(|| make("t2", nb, na, None));
        (
            Self {
                part_a: spec.part_a.clone(),
                part_b: spec.part_b.clone(),
                s1,
                t1,
                s2,
                t2,
            },
            groups,
        )
    }

    pub fn nets(&self) -> impl Iterator<Item = &Net> {
        [Some(&self.s1), self.t1.as_ref(), Some(&self.s2), self.t2.as_ref()]
            .into_iter()
            .flatten()
    }

    /// In-place forward map on `x`; returns the log-determinant.
    pub fn forward(&self, p: &[f64], x: &mut [f64]) -> f64 {
        let u2: Vec<f64> = self.part_b.iter().map(|&i| x[i]).collect();
        let s2 = self.s2.forward(p, &u2).out;
        let t2 = self.t2.as_ref().map(|n| n.forward(p, &u2).out);
        let mut v1 = Vec::with_capacity(self.part_a.len());
        for (k, &i) in self.part_a.iter().enumerate() {
            let shift = t2.as_ref().map_or(0.0, |t| t[k]);
            v1.push(x[i] * s2[k].exp() + shift);
        }
        let s1 = self.s1.forward(p, &v1).out;
        let t1 = self.t1.as_ref().map(|n| n.forward(p, &v1).out);
        for (k, &i) in self.part_a.iter().enumerate() {
            x[i] = v1[k];
        }
        for (k, &i) in self.part_b.iter().enumerate() {
            let shift = t1.as_ref().map_or(0.0, |t| t[k]);
            x[i] = x[i] * s1[k].exp() + shift;
        }
        s1.iter().sum::<f64>() + s2.iter().sum::<f64>()
    }

    /// In-place inverse map on `x`; returns the inverse log-determinant and the cache.
    pub fn inverse(&self, p: &[f64], x: &mut [f64]) -> (f64, InverseCache) {
        let v1: Vec<f64> = self.part_a.iter().map(|&i| x[i]).collect();
        let s1 = self.s1.forward(p, &v1);
        let t1 = self.t1.as_ref().map(|n| n.forward(p, &v1));
        let u2: Vec<f64> = self
            .part_b
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let shift = t1.as_ref().map_or(0.0, |t| t.out[k]);
                (x[i] - shift) * (-s1.out[k]).exp()
            })
            .collect();
        let s2 = self.s2.forward(p, &u2);
        let t2 = self.t2.as_ref().map(|n| n.forward(p, &u2));
        let u1: Vec<f64> = v1
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let shift = t2.as_ref().map_or(0.0, |t| t.out[k]);
                (v - shift) * (-s2.out[k]).exp()
            })
            .collect();
        for (k, &i) in self.part_a.iter().enumerate() {
            x[i] = u1[k];
        }
        for (k, &i) in self.part_b.iter().enumerate() {
            x[i] = u2[k];
        }
        let logdet = -(s1.out.iter().sum::<f64>() + s2.out.iter().sum::<f64>());
        (
            logdet,
            InverseCache {
                v1,
                u2,
                u1,
                s1,
                t1,
                s2,
                t2,
            },
        )
    }

    /// Reverse sweep through one inverse block. On entry `adj` holds
    /// ∂L/∂(block output z-side); on exit ∂L/∂(block input x-side). The block's
    /// own log-determinant enters L with weight one.
    pub fn inverse_backward(&self, p: &[f64], cache: &InverseCache, adj: &mut [f64], grad: &mut [f64]) {
        let na = self.part_a.len();
        let nb = self.part_b.len();
        let u1_adj: Vec<f64> = self.part_a.iter().map(|&i| adj[i]).collect();
        let mut u2_adj: Vec<f64> = self.part_b.iter().map(|&i| adj[i]).collect();
        let mut v1_adj = vec![0.0; na];

        // u1 = (v1 − t2) e^{−s2}
        let mut s2_adj = vec![0.0; na];
        let mut t2_adj = vec![0.0; na];
        for k in 0..na {
            let m = (-cache.s2.out[k]).exp();
            v1_adj[k] += u1_adj[k] * m;
            t2_adj[k] = -u1_adj[k] * m;
            s2_adj[k] = -u1_adj[k] * cache.u1[k] - 1.0;
        }
        self.s2.backward(p, &cache.u2, &cache.s2, &s2_adj, grad, &mut u2_adj);
        if let (Some(net), Some(c)) = (&self.t2, &cache.t2) {
            net.backward(p, &cache.u2, c, &t2_adj, grad, &mut u2_adj);
        }

        // u2 = (v2 − t1) e^{−s1}
        let mut v2_adj = vec![0.0; nb];
        let mut s1_adj = vec![0.0; nb];
        let mut t1_adj = vec![0.0; nb];
        for k in 0..nb {
            let m = (-cache.s1.out[k]).exp();
            v2_adj[k] = u2_adj[k] * m;
            t1_adj[k] = -u2_adj[k] * m;
            s1_adj[k] = -u2_adj[k] * cache.u2[k] - 1.0;
        }
        self.s1.backward(p, &cache.v1, &cache.s1, &s1_adj, grad, &mut v1_adj);
        if let (Some(net), Some(c)) = (&self.t1, &cache.t1) {
            net.backward(p, &cache.v1, c, &t1_adj, grad, &mut v1_adj);
        }

        for (k, &i) in self.part_a.iter().enumerate() {
            adj[i] = v1_adj[k];
        }
        for (k, &i) in self.part_b.iter().enumerate() {
            adj[i] = v2_adj[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_split_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 2..10 {
            let spec = CouplingBlockSpec::random(d, true, &mut rng);
            spec.validate(d).unwrap();
            assert_eq!(spec.part_a.len(), d / 2);
        }
    }

    #[test]
    fn invalid_splits_rejected() {
        let bad = CouplingBlockSpec {
            part_a: vec![0, 0],
            part_b: vec![1],
            hidden: 1,
            include_t: false,
        };
        assert!(bad.validate(3).is_err());
        let empty = CouplingBlockSpec {
            part_a: vec![],
            part_b: vec![0, 1],
            hidden: 1,
            include_t: false,
        };
        assert!(empty.validate(2).is_err());
        let short = CouplingBlockSpec {
            part_a: vec![0],
            part_b: vec![1],
            hidden: 1,
            include_t: false,
        };
        assert!(short.validate(3).is_err());
    }

    #[test]
    fn single_block_with_constant_scale() {
        // s2 ≡ c via its output bias, no t nets, u1 = coordinate 0.
        let spec = CouplingBlockSpec {
            part_a: vec![0],
            part_b: vec![1],
            hidden: 1,
            include_t: false,
        };
        let (nets, _) = BlockNets::layout(0, &spec, 0);
        let mut p = vec![0.0; spec.param_count()];
        let c = 0.3;
        let raw = SCALE_CLAMP * (c / SCALE_CLAMP).atanh();
        p[nets.s2.b2()] = raw;
        let mut x = [1.0, 1.0];
        let logdet = nets.forward(&p, &mut x);
        assert!((x[0] - c.exp()).abs() < 1e-14);
        // s1 has zero output layer, so v2 = u2.
        assert!((x[1] - 1.0).abs() < 1e-14);
        assert!((logdet - c).abs() < 1e-14);
    }
}
