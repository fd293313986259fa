use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse real vector with strictly increasing column indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from unordered `(column, value)` pairs. Duplicate columns are
    /// summed; exact zeros are dropped.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut indices = Vec::with_capacity(pairs.len());
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        for (c, v) in pairs {
            if indices.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
            }
        }
        let mut out = SparseVec { indices, values };
        out.retain_nonzero();
        out
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        SparseVec { indices, values }
    }

    fn retain_nonzero(&mut self) {
        let mut k = 0;
        for i in 0..self.indices.len() {
            if self.values[i] != 0.0 {
                self.indices[k] = self.indices[i];
                self.values[k] = self.values[i];
                k += 1;
            }
        }
        self.indices.truncate(k);
        self.values.truncate(k);
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, col: usize) -> f64 {
        match self.indices.binary_search(&col) {
            Ok(i) => self.values[i],
            Err(_) => 0.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Largest column index plus one (0 for the empty vector).
    pub fn min_dim(&self) -> usize {
        self.indices.last().map_or(0, |&c| c + 1)
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.min_dim() > dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.min_dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(c, v)| v * dense[c]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (c, v) in self.iter() {
            out[c] = v;
        }
        out
    }

    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> SparseVec {
        SparseVec::from_pairs(self.iter().map(|(c, v)| (c, f(c, v))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_sorted_merged_and_pruned() {
        let v = SparseVec::from_pairs(vec![(4, 1.0), (1, 2.0), (4, 0.5), (2, 0.0)]);
        assert_eq!(v.indices(), &[1, 4]);
        assert_eq!(v.values(), &[2.0, 1.5]);
        assert_eq!(v.get(4), 1.5);
        assert_eq!(v.get(3), 0.0);
        assert_eq!(v.min_dim(), 5);
    }

    #[test]
    fn dense_roundtrip_and_dot() {
        let d = [0.0, 3.0, 0.0, -1.0];
        let v = SparseVec::from_dense(&d);
        assert_eq!(v.to_dense(4), d.to_vec());
        assert_eq!(v.dot(&[1.0, 2.0, 3.0, 4.0]), 2.0);
        assert!(v.check_dim(3).is_err());
        assert!(v.check_dim(4).is_ok());
    }
}
