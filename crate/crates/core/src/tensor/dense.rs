use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("matrix entries must be finite".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// No finiteness check: kernel outputs may legitimately overflow.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from `[0, 1)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute difference norm when
    /// `other` is zero.
    pub fn relative_error(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "relative_error shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = other.frobenius_norm();
        if base == 0.0 {
            diff
        } else {
            diff / base
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// One `I_n × R` factor matrix per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrices {
    rank: usize,
    factors: Vec<DenseMatrix>,
}

impl FactorMatrices {
    pub fn new(factors: Vec<DenseMatrix>) -> Result<Self> {
        let rank = factors
            .first()
            .map(DenseMatrix::cols)
            .ok_or_else(|| Error::Shape("no factor matrices".into()))?;
        if rank == 0 {
            return Err(Error::Shape("rank must be positive".into()));
        }
        if let Some(m) = factors.iter().position(|f| f.cols() != rank) {
            return Err(Error::Shape(format!(
                "factor {m} has {} columns, expected {rank}",
                factors[m].cols()
            )));
        }
        Ok(FactorMatrices { rank, factors })
    }

    /// Uniform `[0, 1)` initialization.
    pub fn random<R: Rng + ?Sized>(dims: &[u64], rank: usize, rng: &mut R) -> Self {
        FactorMatrices {
            rank,
            factors: dims
                .iter()
                .map(|&d| DenseMatrix::random(d as usize, rank, rng))
                .collect(),
        }
    }

    pub fn filled(dims: &[u64], rank: usize, value: f64) -> Self {
        FactorMatrices {
            rank,
            factors: dims
                .iter()
                .map(|&d| DenseMatrix::filled(d as usize, rank, value))
                .collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn get(&self, mode: usize) -> &DenseMatrix {
        &self.factors[mode]
    }

    pub fn set(&mut self, mode: usize, factor: DenseMatrix) {
        assert_eq!(factor.cols(), self.rank);
        assert_eq!(factor.rows(), self.factors[mode].rows());
        self.factors[mode] = factor;
    }

    pub fn iter(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.factors.iter()
    }

    /// Checks that factor `n` has `dims[n]` rows.
    pub fn check_conforms(&self, dims: &[u64]) -> Result<()> {
        if self.factors.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} factor matrices for an order-{} tensor",
                self.factors.len(),
                dims.len()
            )));
        }
        for (m, (f, &d)) in self.factors.iter().zip(dims).enumerate() {
            if f.rows() as u64 != d {
                return Err(Error::Shape(format!(
                    "factor {m} has {} rows, mode length is {d}",
                    f.rows()
                )));
            }
        }
        Ok(())
    }

    /// Resident size of all factors in bytes.
    pub fn footprint_bytes(&self) -> u64 {
        self.factors
            .iter()
            .map(|f| (f.rows() * f.cols() * 8) as u64)
            .sum()
    }
}
