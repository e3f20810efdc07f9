use crate::error::{Error, Result};

/// An N-order sparse tensor in coordinate form.
///
/// Indices are stored per mode (structure of arrays) and are 0-based. The
/// constructor merges duplicate coordinates by summation, keeping the
/// position of the first occurrence, so the element order of duplicate-free
/// input is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensorCoo {
    dims: Vec<u64>,
    indices: Vec<Vec<u64>>,
    values: Vec<f64>,
}

impl SparseTensorCoo {
    pub fn new(dims: Vec<u64>, indices: Vec<Vec<u64>>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("tensor needs at least one mode".into()));
        }
        if let Some(m) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("mode {m} has length 0")));
        }
        if indices.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} index arrays for an order-{} tensor",
                indices.len(),
                dims.len()
            )));
        }
        let nnz = values.len();
        for (mode, (idx, &dim)) in indices.iter().zip(&dims).enumerate() {
            if idx.len() != nnz {
                return Err(Error::Shape(format!(
                    "mode {mode} has {} indices but there are {nnz} values",
                    idx.len()
                )));
            }
            if let Some(&coord) = idx.iter().find(|&&c| c >= dim) {
                return Err(Error::CoordinateOutOfRange { mode, coord, dim });
            }
        }
        let mut tensor = SparseTensorCoo {
            dims,
            indices,
            values,
        };
        tensor.merge_duplicates();
        Ok(tensor)
    }

    /// Tensor with no stored elements.
    pub fn empty(dims: Vec<u64>) -> Result<Self> {
        let order = dims.len();
        Self::new(dims, vec![Vec::new(); order], Vec::new())
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indices(&self, mode: usize) -> &[u64] {
        &self.indices[mode]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coord(&self, element: usize) -> Vec<u64> {
        self.indices.iter().map(|idx| idx[element]).collect()
    }

    /// Frobenius norm of the stored values.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(coordinate, value)` pairs sorted lexicographically by coordinate.
    pub fn sorted_entries(&self) -> Vec<(Vec<u64>, f64)> {
        let mut entries: Vec<_> = (0..self.nnz())
            .map(|e| (self.coord(e), self.values[e]))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries
    }

    fn merge_duplicates(&mut self) {
        let nnz = self.nnz();
        if nnz < 2 {
            return;
        }
        let mut perm: Vec<usize> = (0..nnz).collect();
        perm.sort_by(|&a, &b| {
            self.indices
                .iter()
                .map(|idx| idx[a].cmp(&idx[b]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let same = |a: usize, b: usize| self.indices.iter().all(|idx| idx[a] == idx[b]);
        let mut keep = vec![true; nnz];
        let mut merged = self.values.clone();
        let mut any = false;
        let mut head = perm[0];
        for w in 1..nnz {
            let e = perm[w];
            if same(head, e) {
                merged[head] += self.values[e];
                keep[e] = false;
                any = true;
            } else {
                head = e;
            }
        }
        if !any {
            return;
        }
        for idx in &mut self.indices {
            *idx = idx
                .iter()
                .zip(&keep)
                .filter_map(|(&c, &k)| k.then_some(c))
                .collect();
        }
        self.values = merged
            .into_iter()
            .zip(&keep)
            .filter_map(|(v, &k)| k.then_some(v))
            .collect();
    }
}
