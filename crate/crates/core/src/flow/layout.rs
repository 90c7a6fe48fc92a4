//! Flat parameter storage with a named-group registry.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named, contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Registry mapping group names (`latent.mu`, `block[2].s1`, ...) to index ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a group at the current end and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let start = self.total();
        self.groups.push(ParamGroup {
            name: name.into(),
            start,
            len,
        });
        start
    }

    pub fn total(&self) -> usize {
        self.groups.last().map_or(0, |g| g.start + g.len)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Name of the group owning parameter `index`.
    pub fn group_of(&self, index: usize) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.range().contains(&index))
    }

    /// Checks that the groups are disjoint, uniquely named and tile `[0, total)`.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, g) in self.groups.iter().enumerate() {
            if g.start != next {
                return Err(Error::Precondition(format!(
                    "parameter group `{}` starts at {} but previous group ends at {}",
                    g.name, g.start, next
                )));
            }
            if self.groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::Precondition(format!(
                    "duplicate parameter group `{}`",
                    g.name
                )));
            }
            next = g.start + g.len;
        }
        Ok(())
    }
}

/// The variational parameters θ together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch {
                expected: layout.total(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|g| &self.values[g.range()])
    }

    pub(crate) fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update"));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_tile_the_vector() {
        let mut layout = ParamLayout::new();
        assert_eq!(layout.push("latent.mu", 3), 0);
        assert_eq!(layout.push("latent.cov_factor", 6), 3);
        assert_eq!(layout.push("block[0].s1", 4), 9);
        assert_eq!(layout.total(), 13);
        layout.validate().unwrap();
        assert_eq!(layout.group_of(10).unwrap().name, "block[0].s1");
        assert!(layout.group_of(13).is_none());
    }

    #[test]
    fn rejects_wrong_length_and_non_finite() {
        let mut layout = ParamLayout::new();
        layout.push("a", 2);
        assert!(ParameterVector::new(vec![0.0], layout.clone()).is_err());
        assert!(ParameterVector::new(vec![0.0, f64::NAN], layout.clone()).is_err());
        let p = ParameterVector::new(vec![1.0, 2.0], layout).unwrap();
        assert_eq!(p.group("a"), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut layout = ParamLayout::new();
        layout.push("a", 1);
        layout.push("a", 1);
        assert!(layout.validate().is_err());
    }
}
