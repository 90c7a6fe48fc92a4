use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n × d block of sample points, row-major, with the seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    dim: usize,
    points: Vec<f64>,
    pub seed: Option<u64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, points: Vec<f64>, seed: Option<u64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len(),
            });
        }
        Ok(Self { dim, points, seed })
    }

    /// n copies of `point`.
    pub fn replicate(point: &[f64], n: usize) -> Self {
        Self {
            dim: point.len(),
            points: point.repeat(n),
            seed: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }
}
